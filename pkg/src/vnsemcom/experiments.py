"""Experiment drivers behind the CLI subcommands.

Each driver takes a validated Scenario and returns ``(rows, summary_line)``.
"""
from __future__ import annotations

from .auditgame import run_trust_campaign
from .camouflage import CamouflageConfig, JudgeConfig, evaluate, init_pipeline, train_camouflage, train_judge
from .channel import ChannelParams
from .codec import CodecConfig, SemanticCodec, end_to_end_ssim, make_dataset, mean_ssim, overhead_ratio, train_codec
from .fedtrain import condition_label, run_federation
from .numkit import RngStream
from .report import Collector
from .scenario import Scenario


def codec_config(scn: Scenario) -> CodecConfig:
    c = scn.codec
    return CodecConfig(c.latent_dim, c.hidden, c.epochs, c.lr, c.batch_size)


def codec_data(scn: Scenario) -> tuple:
    train = make_dataset(scn.dataset, scn.codec.train_size, RngStream(scn.master_seed, "dataset/train"),
                         scn.image_side)
    test = make_dataset(scn.dataset, scn.codec.test_size, RngStream(scn.master_seed, "dataset/test"),
                        scn.image_side)
    return train, test


def base_codec(scn: Scenario, train) -> SemanticCodec:
    return train_codec(train, codec_config(scn), RngStream(scn.master_seed, "init/codec"))


def run_camouflage(scn: Scenario, experiment: str = "camouflage") -> tuple:
    cam = scn.camouflage
    seed = scn.master_seed
    train, test = codec_data(scn)
    codec = base_codec(scn, train)
    judge = train_judge(train, JudgeConfig(epochs=cam.judge_epochs), RngStream(seed, "init/judge"))
    cfg = CamouflageConfig(cam.epsilon, cam.lam, cam.epochs, cam.lr, cam.batch_size, cam.hidden, cam.policy)
    chs = (scn.legit_channel, scn.eaves_channel)
    pipe = train_camouflage(codec, train, chs, cfg, RngStream(seed, "camouflage"))
    # control: zero budget, untrained generator
    control = init_pipeline(codec, *chs, 0.0, RngStream(seed, "camouflage").child("init"), cfg)

    col = Collector(experiment, seed)
    col.add("base", -1, "train_ssim", mean_ssim(codec, train))
    col.add("base", -1, "judge_accuracy", judge.heldout_accuracy)
    col.add("trained", -1, "epsilon", pipe.epsilon)
    col.add("trained", -1, "loss_legit", pipe.final_losses[0])
    col.add("trained", -1, "loss_eaves", pipe.final_losses[1])
    out = {}
    for cond, p in (("trained", pipe), ("control", control)):
        o = evaluate(p, judge, test, cam.trials, RngStream(seed, f"channel/eval/{cond}"))
        out[cond] = o
        for name in ("legit_accuracy", "legit_camo_rate", "legit_ssim", "misleading_rate",
                     "eaves_original_rate", "eaves_mse_camo", "eaves_mse_original"):
            col.add(cond, -1, name, getattr(o, name))
    t, c = out["trained"], out["control"]
    summary = (f"camouflage: legit_accuracy={t.legit_accuracy:.4f} misleading_rate={t.misleading_rate:.4f} "
               f"control_misleading_rate={c.misleading_rate:.4f}")
    return col.rows, summary


def run_fedtrain(scn: Scenario, experiment: str = "fedtrain") -> tuple:
    res = run_federation(scn, experiment=experiment)
    cond = condition_label(scn.federation.mechanism, scn.attack)
    summary = f"fedtrain: {cond} final_ssim={res.final_ssim:.4f}"
    return res.rows, summary, res.kept_log


def run_auditgame(scn: Scenario, experiment: str = "auditgame") -> tuple:
    res = run_trust_campaign(scn, experiment=experiment)
    summary = (f"auditgame: {scn.game.mechanism} untrustworthy={scn.game.untrustworthy_fraction:g} "
               f"final_accuracy={res.final_accuracy:.4f} lazy_below_theta_round={res.lazy_below_theta_round}")
    return res.rows, summary


def sweep_channel(scn: Scenario, snr_db: float) -> ChannelParams:
    sw = scn.sweep
    return ChannelParams(sw.channel_kind, sw.k_factor if sw.channel_kind == "rician" else 0.0, float(snr_db))


def run_sweep_snr(scn: Scenario, experiment: str = "sweep_snr") -> tuple:
    seed = scn.master_seed
    train, test = codec_data(scn)
    codec = base_codec(scn, train)
    col = Collector(experiment, seed)
    cond = f"{scn.sweep.channel_kind}"
    col.add(cond, -1, "clean_ssim", mean_ssim(codec, test))
    values = []
    for i, snr in enumerate(scn.sweep.snr_db):
        ch = sweep_channel(scn, snr)
        v = end_to_end_ssim(codec, ch, test, RngStream(seed, f"channel/sweep/{snr:g}"))
        values.append(v)
        col.add(cond, i, "snr_db", snr)
        col.add(cond, i, "ssim", v)
    summary = "sweep-snr: " + " ".join(f"{s:g}dB={v:.4f}" for s, v in zip(scn.sweep.snr_db, values))
    return col.rows, summary


def run_overhead(scn: Scenario, experiment: str = "overhead") -> tuple:
    seed = scn.master_seed
    train, test = codec_data(scn)
    codec = base_codec(scn, train)
    col = Collector(experiment, seed)
    o = overhead_ratio(codec, scn.overhead.frames)
    cond = f"latent{codec.latent_dim}"
    col.add(cond, -1, "frames", scn.overhead.frames)
    col.add(cond, -1, "raw_bytes", o.raw_bytes)
    col.add(cond, -1, "semantic_bytes", o.semantic_bytes)
    col.add(cond, -1, "overhead_ratio", o.ratio)
    noiseless = end_to_end_ssim(codec, ChannelParams(), test, RngStream(seed, "channel/overhead"), quantize=True)
    col.add(cond, -1, "quantized_ssim", noiseless)
    summary = (f"overhead: frames={scn.overhead.frames} raw_bytes={o.raw_bytes} "
               f"semantic_bytes={o.semantic_bytes} ratio={o.ratio:.4g}")
    return col.rows, summary


SUBCOMMANDS = {
    "run-camouflage": run_camouflage,
    "run-fedtrain": run_fedtrain,
    "run-auditgame": run_auditgame,
    "sweep-snr": run_sweep_snr,
    "overhead": run_overhead,
}
