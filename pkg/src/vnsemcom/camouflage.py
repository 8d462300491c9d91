"""Semantic camouflage transmission.

A camouflage encoder and a CSI-conditioned noise generator learn a bounded
latent perturbation ``delta = eps * tanh(gen(camo_enc(x_camo) ++ csi_legit ++ csi_eaves))``
that is added to the frozen base codec's latent before transmission. The
joint loss pulls the legitimate (Rician) decode toward the original image and
the eavesdropper (Rayleigh) decode toward the camouflage image.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit
from .channel import ChannelParams, csi_features, transmit_batch
from .codec import SemanticCodec, SsimParams, SyntheticDataset, ssim_batch
from .errors import CalibrationError, ConfigurationError, TrainingError
from .numkit import DenseNet, RngStream

POLICIES = ("next_class",)


def camouflage_class(policy: str, labels, class_count: int) -> np.ndarray:
    """Class of the decoy sent alongside each original label."""
    if policy != "next_class":
        raise ConfigurationError(f"unknown camouflage policy {policy!r}")
    return (np.asarray(labels, dtype=int) + 1) % class_count


def pick_camouflage(data: SyntheticDataset, labels, policy: str, rng: RngStream) -> tuple:
    """Draw one decoy image per label from ``data`` according to ``policy``."""
    classes = camouflage_class(policy, labels, data.class_count)
    pools = [np.flatnonzero(data.labels == k) for k in range(data.class_count)]
    idx = np.empty(classes.size, dtype=int)
    for i, k in enumerate(classes):
        if pools[k].size == 0:
            raise ConfigurationError(f"no images of camouflage class {k} available")
        idx[i] = pools[k][rng.integers(pools[k].size)]
    return data.images[idx], classes


@dataclass(frozen=True)
class CamouflageConfig:
    epsilon: float | None = None  # None: 0.5 x mean per-dimension latent std of the base codec
    lam: float = 1.0
    epochs: int = 20
    lr: float = 2.0
    batch_size: int = 16
    hidden: int = 64
    policy: str = "next_class"


@dataclass(frozen=True)
class CamouflagePipeline:
    base_codec: SemanticCodec
    camo_encoder: DenseNet
    noise_gen: DenseNet
    legit_ch: ChannelParams
    eaves_ch: ChannelParams
    epsilon: float
    lam: float = 1.0
    policy: str = "next_class"
    final_losses: tuple = ()

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigurationError(f"noise budget must be >= 0, got {self.epsilon}")

    @property
    def context(self) -> np.ndarray:
        return np.concatenate([csi_features(self.legit_ch), csi_features(self.eaves_ch)])


def default_epsilon(codec: SemanticCodec, data: SyntheticDataset) -> float:
    return 0.5 * float(codec.encode(data.images).std(axis=0).mean())


def _gen_input(pipeline: CamouflagePipeline, z_camo: np.ndarray) -> np.ndarray:
    z_camo = np.atleast_2d(z_camo)
    return np.hstack([z_camo, np.tile(pipeline.context, (z_camo.shape[0], 1))])


def perturbation(pipeline: CamouflagePipeline, x_camouflage) -> np.ndarray:
    x = np.asarray(x_camouflage, dtype=np.float64)
    z_camo = numkit.forward(pipeline.camo_encoder, np.atleast_2d(x))
    delta = pipeline.epsilon * np.tanh(numkit.forward(pipeline.noise_gen, _gen_input(pipeline, z_camo)))
    return delta[0] if x.ndim == 1 else delta


def craft(pipeline: CamouflagePipeline, x_original, x_camouflage) -> np.ndarray:
    return pipeline.base_codec.encode(x_original) + perturbation(pipeline, x_camouflage)


def init_pipeline(base_codec: SemanticCodec, legit: ChannelParams, eaves: ChannelParams,
                  epsilon: float, rng: RngStream, cfg: CamouflageConfig = CamouflageConfig()) -> CamouflagePipeline:
    """Untrained pipeline: camouflage encoder copied from the base encoder, random generator."""
    latent = base_codec.latent_dim
    gen = numkit.init_net([latent + 2 * len(csi_features(legit)), cfg.hidden, latent],
                          ["relu", "identity"], rng.child("noise_gen"))
    return CamouflagePipeline(base_codec, base_codec.encoder, gen, legit, eaves, float(epsilon),
                              cfg.lam, cfg.policy)


def train_camouflage(base_codec: SemanticCodec, train: SyntheticDataset, chs: tuple,
                     cfg: CamouflageConfig, rng: RngStream) -> CamouflagePipeline:
    """Fit camo encoder + noise generator with the base codec frozen.

    Loss per minibatch: mse(dec(legit(z')), x_orig) + lam * mse(dec(eaves(z')), x_camo),
    with fresh channel realizations every step. Equalized channel noise is
    treated as a constant when differentiating.
    """
    legit, eaves = chs
    if cfg.epochs < 1:
        raise ConfigurationError("epochs must be >= 1")
    eps = default_epsilon(base_codec, train) if cfg.epsilon is None else cfg.epsilon
    pipe = init_pipeline(base_codec, legit, eaves, eps, rng.child("init"), cfg)
    camo, gen = pipe.camo_encoder, pipe.noise_gen
    dec = base_codec.decoder
    latent = base_codec.latent_dim
    z_orig_all = base_codec.encode(train.images)
    step_rng = rng.child("steps")
    n = len(train)
    losses = (np.nan, np.nan)
    for epoch in range(cfg.epochs):
        order = step_rng.permutation(n)
        sum_legit = sum_eaves = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x_orig = train.images[idx]
            x_camo, _ = pick_camouflage(train, train.labels[idx], cfg.policy, step_rng)

            ctrace = numkit.forward_trace(camo, x_camo)
            gtrace = numkit.forward_trace(gen, _gen_input(pipe, ctrace[-1][2]))
            t = np.tanh(gtrace[-1][2])
            z = z_orig_all[idx] + eps * t

            y_legit, _, _ = transmit_batch(z, legit, step_rng)
            y_eaves, _, _ = transmit_batch(z, eaves, step_rng)
            ltrace = numkit.forward_trace(dec, y_legit)
            etrace = numkit.forward_trace(dec, y_eaves)
            loss_l, g_l = numkit.loss_and_grad("mse", ltrace[-1][2], x_orig)
            loss_e, g_e = numkit.loss_and_grad("mse", etrace[-1][2], x_camo)
            if not (np.isfinite(loss_l) and np.isfinite(loss_e)):
                raise TrainingError(f"train_camouflage: loss diverged at epoch {epoch}")
            _, gz_l = numkit.backprop(dec, ltrace, g_l)
            _, gz_e = numkit.backprop(dec, etrace, g_e)
            g_pre = (gz_l + cfg.lam * gz_e) * eps * (1.0 - t * t)
            g_gen, g_in = numkit.backprop(gen, gtrace, g_pre)
            g_camo, _ = numkit.backprop(camo, ctrace, g_in[:, :latent])
            if cfg.lr:
                gen = numkit.sgd_step(gen, g_gen, cfg.lr)
                camo = numkit.sgd_step(camo, g_camo, cfg.lr)
            sum_legit += loss_l * len(idx)
            sum_eaves += loss_e * len(idx)
        losses = (sum_legit / n, sum_eaves / n)
    return CamouflagePipeline(base_codec, camo, gen, legit, eaves, eps, cfg.lam, cfg.policy, losses)


# ---------------------------------------------------------------------------
# judge classifier


@dataclass(frozen=True)
class JudgeConfig:
    hidden: int = 32
    epochs: int = 30
    lr: float = 0.5
    batch_size: int = 16
    holdout: float = 0.25
    floor: float = 0.9


@dataclass(frozen=True)
class JudgeClassifier:
    net: DenseNet
    heldout_accuracy: float = float("nan")

    def predict_proba(self, images) -> np.ndarray:
        return numkit.softmax(numkit.forward(self.net, np.atleast_2d(images)))

    def predict(self, images) -> np.ndarray:
        return self.predict_proba(images).argmax(axis=1)

    def accuracy(self, images, labels) -> float:
        return float(np.mean(self.predict(images) == np.asarray(labels)))


def train_judge(data: SyntheticDataset, cfg: JudgeConfig, rng: RngStream) -> JudgeClassifier:
    """Softmax classifier used to score decodes; fails loudly below the accuracy floor."""
    n = len(data)
    order = rng.child("split").permutation(n)
    n_hold = max(data.class_count, int(round(cfg.holdout * n)))
    held, fit_idx = order[:n_hold], order[n_hold:]
    net = numkit.init_net([data.image_dim, cfg.hidden, data.class_count], ["relu", "identity"], rng.child("init"))
    targets = numkit.one_hot(data.labels, data.class_count)
    net, _ = numkit.fit(net, data.images[fit_idx], targets[fit_idx], "cross_entropy", cfg.epochs, cfg.lr,
                        cfg.batch_size, rng.child("shuffle"), tag="train_judge")
    judge = JudgeClassifier(net)
    acc = judge.accuracy(data.images[held], data.labels[held])
    if acc < cfg.floor:
        raise CalibrationError(
            f"judge held-out accuracy {acc:.3f} below floor {cfg.floor}; raise epochs/hidden or lower jitter")
    return JudgeClassifier(net, acc)


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class CamouflageOutcome:
    legit_accuracy: float  # legit decode classified as the original class
    legit_camo_rate: float  # legit decode classified as the camouflage class
    legit_ssim: float  # legit decode vs original
    misleading_rate: float  # eavesdropper decode classified as the camouflage class
    eaves_original_rate: float
    eaves_mse_camo: float
    eaves_mse_original: float


def evaluate(pipeline: CamouflagePipeline, judge: JudgeClassifier, test: SyntheticDataset, trials: int,
             rng: RngStream, p: SsimParams = SsimParams()) -> CamouflageOutcome:
    """Run ``trials`` camouflaged transmissions per test image over both links."""
    if trials < 1:
        raise ConfigurationError("trials must be >= 1")
    codec = pipeline.base_codec
    rows = {k: [] for k in ("la", "lc", "ls", "ec", "eo", "emc", "emo")}
    for trial in range(trials):
        trng = rng.child(f"trial{trial}")
        x_camo, camo_cls = pick_camouflage(test, test.labels, pipeline.policy, trng.child("pick"))
        z = craft(pipeline, test.images, x_camo)
        y_l, _, _ = transmit_batch(z, pipeline.legit_ch, trng.child("legit"))
        y_e, _, _ = transmit_batch(z, pipeline.eaves_ch, trng.child("eaves"))
        dec_l, dec_e = codec.decode(y_l), codec.decode(y_e)
        pred_l, pred_e = judge.predict(dec_l), judge.predict(dec_e)
        rows["la"].append(pred_l == test.labels)
        rows["lc"].append(pred_l == camo_cls)
        rows["ls"].append(ssim_batch(dec_l, test.images, p))
        rows["ec"].append(pred_e == camo_cls)
        rows["eo"].append(pred_e == test.labels)
        rows["emc"].append(np.mean((dec_e - x_camo) ** 2, axis=1))
        rows["emo"].append(np.mean((dec_e - test.images) ** 2, axis=1))
    m = {k: float(np.mean(np.concatenate(v))) for k, v in rows.items()}
    return CamouflageOutcome(m["la"], m["lc"], m["ls"], m["ec"], m["eo"], m["emc"], m["emo"])


def misleading_rate(pipeline, judge, test, trials_per_image, rng) -> float:
    return evaluate(pipeline, judge, test, trials_per_image, rng).misleading_rate


def legitimate_fidelity(pipeline, judge, test, trials, rng) -> tuple:
    out = evaluate(pipeline, judge, test, trials, rng)
    return out.legit_ssim, out.legit_accuracy
