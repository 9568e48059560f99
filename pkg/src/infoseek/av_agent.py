"""Active-vision agent: hierarchical two-level VAE perception, MC
information-gain action selection, and a gradient-isolated classifier.

The lower VAE encodes each glimpse into a sensory code z; the upper VAE
encodes the running sum of codes into an abstract state s and decodes
(s, location) back into a distribution over codes. Everything is built
from dense nets on the diffcore tape, so the MC estimate of expected
entropy reduction is differentiable end to end with respect to the
action network, given frozen noise draws.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from .av_env import FoveationSpec, Glimpse, ImageCorpus, center_pixel, foveate
from .diffcore import DenseNet, Node, Optimizer, Tape, load_checkpoint, save_checkpoint
from .numerics import LOG_2PI, GaussianParams

__all__ = [
    "AvConfig",
    "HierarchicalVae",
    "TrialRecord",
    "ValueNoise",
    "AvRunLog",
    "AvRunResult",
    "build_action_net",
    "build_decision_net",
    "encode_step",
    "complete_trial",
    "av_elbo",
    "approx_value",
    "draw_value_noise",
    "bas_select",
    "generate_stitched",
    "central_grid",
    "classify",
    "train_classifier",
    "run_av_training",
    "collect_features",
    "evaluate_accuracy",
]

AV_STRATEGIES = ("bas", "random")


@dataclass
class AvConfig:
    """Hyperparameters for one active-vision training run."""

    image_size: int = 28
    patch_dim: int = 8
    n_fov: int = 1
    fov_scale: int = 2
    n_fixations: int = 3
    z_dim: int = 32
    s_dim: int = 64
    beta: float = 0.1
    sigma_action: float = 0.15
    mc_samples: int = 5
    perception_lr: float = 1e-3
    action_lr: float = 1e-3
    decision_lr: float = 1e-3
    batch_size: int = 64
    pretrain_epochs: int = 0
    train_epochs: int = 5
    hidden_units: int = 256
    action_hidden: tuple = (64, 32)
    decision_hidden: tuple = (256, 256)
    strategy: str = "bas"
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in AV_STRATEGIES:
            raise ValueError(f"strategy must be one of {AV_STRATEGIES}")
        if self.n_fixations < 1:
            raise ValueError("need at least one fixation")
        if self.sigma_action <= 0:
            raise ValueError("sigma_action must be positive")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be at least 1")

    @property
    def foveation(self) -> FoveationSpec:
        return FoveationSpec(d=self.patch_dim, n_fov=self.n_fov, scale=self.fov_scale)


def translated_defaults(**overrides) -> AvConfig:
    """Config preset for 60x60 translated corpora."""
    base = dict(
        image_size=60,
        patch_dim=12,
        n_fov=3,
        fov_scale=2,
        n_fixations=4,
        z_dim=64,
        s_dim=128,
        pretrain_epochs=10,
    )
    base.update(overrides)
    return AvConfig(**base)


class HierarchicalVae:
    """Two stacked VAEs: glimpse <-> z and sum-of-z <-> s.

    Encoder heads output (mean, raw) with sigma = exp(raw / 2); the
    glimpse decoder predicts the mean of a unit-variance Gaussian.
    """

    def __init__(self, config: AvConfig, rng: np.random.Generator):
        d = config.foveation.glimpse_len
        hz, hs = config.hidden_units, config.hidden_units
        self.z_dim = config.z_dim
        self.s_dim = config.s_dim
        self.glimpse_len = d
        self.f1_enc = DenseNet("f1_enc", [d + 2, hz, hz, 2 * config.z_dim], rng=rng)
        self.f1_dec = DenseNet("f1_dec", [config.z_dim, hz, hz, d], rng=rng)
        self.f2_enc = DenseNet("f2_enc", [config.z_dim, hs, hs, 2 * config.s_dim], rng=rng)
        self.f2_dec = DenseNet("f2_dec", [config.s_dim + 2, hs, hs, 2 * config.z_dim], rng=rng)

    @property
    def nets(self) -> list[DenseNet]:
        return [self.f1_enc, self.f1_dec, self.f2_enc, self.f2_dec]

    @property
    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for net in self.nets:
            out.update(net.params)
        return out

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for net in self.nets:
            h.update(net.checksum().encode())
        return h.hexdigest()

    def save(self, path) -> None:
        save_checkpoint(path, self.params)

    def load(self, path) -> None:
        tensors = load_checkpoint(path)
        for net in self.nets:
            net.set_params(tensors)

    # numpy-side heads -----------------------------------------------------

    def encode_low(self, x_l: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        out = self.f1_enc.apply(x_l)
        return out[..., : self.z_dim], 0.5 * out[..., self.z_dim :]

    def encode_high(self, h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        out = self.f2_enc.apply(h)
        return out[..., : self.s_dim], 0.5 * out[..., self.s_dim :]

    def decode_high(self, s_l: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        out = self.f2_dec.apply(s_l)
        return out[..., : self.z_dim], 0.5 * out[..., self.z_dim :]


def build_action_net(config: AvConfig, rng: np.random.Generator) -> DenseNet:
    sizes = [config.s_dim, *config.action_hidden, 2]
    return DenseNet("action", sizes, rng=rng)


def build_decision_net(config: AvConfig, n_classes: int, rng: np.random.Generator) -> DenseNet:
    sizes = [config.s_dim, *config.decision_hidden, n_classes]
    return DenseNet("decision", sizes, rng=rng)


# ---------------------------------------------------------------------------
# trials
# ---------------------------------------------------------------------------


@dataclass
class TrialRecord:
    """One fixation sequence: glimpses, locations, sampled codes, and the
    noise that produced them (kept so losses rebuild bit-identically)."""

    glimpses: list = field(default_factory=list)
    locations: list = field(default_factory=list)
    z_samples: list = field(default_factory=list)
    eps_z: list = field(default_factory=list)
    h: np.ndarray | None = None
    eps_s: np.ndarray | None = None
    q2: GaussianParams | None = None
    label: int | None = None

    @property
    def t(self) -> int:
        return len(self.glimpses)


def encode_step(
    vae: HierarchicalVae,
    trial: TrialRecord,
    glimpse: Glimpse,
    rng: np.random.Generator | None = None,
    eps: np.ndarray | None = None,
    sample: bool = True,
) -> tuple[GaussianParams, np.ndarray, np.ndarray]:
    """Encode one glimpse, draw z by reparameterization, and extend the
    running sum. With ``sample=False`` the posterior mean is used."""
    mu, log_std = vae.encode_low(np.concatenate([glimpse.x, glimpse.l]))
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(log_std))):
        raise FloatingPointError("encoder produced non-finite outputs")
    q1 = GaussianParams(mu, log_std)
    if sample:
        if eps is None:
            if rng is None:
                raise ValueError("sampling needs an rng or explicit eps")
            eps = rng.standard_normal(vae.z_dim)
        z = mu + np.exp(log_std) * eps
    else:
        eps = np.zeros(vae.z_dim)
        z = mu.copy()
    trial.glimpses.append(glimpse.x)
    trial.locations.append(glimpse.l)
    trial.z_samples.append(z)
    trial.eps_z.append(eps)
    trial.h = z.copy() if trial.h is None else trial.h + z
    return q1, z, trial.h


def complete_trial(
    vae: HierarchicalVae,
    trial: TrialRecord,
    rng: np.random.Generator | None = None,
    eps_s: np.ndarray | None = None,
) -> GaussianParams:
    """Infer q2(s) from the finished sum and fix the s-sample noise used
    by the loss."""
    mu, log_std = vae.encode_high(trial.h)
    trial.q2 = GaussianParams(mu, log_std)
    if eps_s is not None:
        trial.eps_s = np.asarray(eps_s, dtype=np.float64)
    elif rng is not None:
        trial.eps_s = rng.standard_normal(vae.s_dim)
    else:
        trial.eps_s = np.zeros(vae.s_dim)
    return trial.q2


# ---------------------------------------------------------------------------
# losses (batched graph builders; single-trial entry points wrap batch 1)
# ---------------------------------------------------------------------------


def _heads(tape: Tape, out: Node, dim: int) -> tuple[Node, Node]:
    return tape.slice_cols(out, 0, dim), tape.slice_cols(out, dim, 2 * dim) * 0.5


@dataclass
class _ElboAux:
    loss: Node
    recon_sq_mean: float  # mean squared residual per pixel
    elbo: float


def _build_elbo(
    tape: Tape,
    vae: HierarchicalVae,
    xs: list[np.ndarray],
    ls: list[np.ndarray],
    eps_z: list[np.ndarray],
    eps_s: np.ndarray,
    beta: float,
) -> _ElboAux:
    """Negated ELBO averaged over the batch.

    ``xs[t]``, ``ls[t]``, ``eps_z[t]`` are (B, .) arrays for fixation t;
    per trial the objective is reconstruction + sum_t KL(q1_t || p(z_t |
    s~, l_t)) + beta * KL(q2 || N(0, I)), with the reconstruction
    constant (D/2) log 2pi per fixation included.
    """
    n_t = len(xs)
    batch = xs[0].shape[0]
    dim_x = xs[0].shape[1]

    mu1s, logstd1s = [], []
    h = None
    recon_total = None
    for t in range(n_t):
        x_l = tape.const(np.concatenate([xs[t], ls[t]], axis=-1))
        mu1, logstd1 = _heads(tape, vae.f1_enc.forward(tape, x_l), vae.z_dim)
        mu1s.append(mu1)
        logstd1s.append(logstd1)
        z = mu1 + tape.exp(logstd1) * tape.const(eps_z[t])
        h = z if h is None else h + z
        xhat = vae.f1_dec.forward(tape, z)
        sq = tape.sum(tape.square(tape.const(xs[t]) - xhat))
        recon_total = sq if recon_total is None else recon_total + sq

    mu2, logstd2 = _heads(tape, vae.f2_enc.forward(tape, h), vae.s_dim)
    kl_s = 0.5 * tape.sum(
        tape.square(mu2) + tape.exp(2.0 * logstd2) - 1.0 - 2.0 * logstd2
    )
    s_sample = mu2 + tape.exp(logstd2) * tape.const(eps_s)

    kl_z_total = None
    for t in range(n_t):
        dec = vae.f2_dec.forward(tape, tape.concat([s_sample, tape.const(ls[t])]))
        mup, logstdp = _heads(tape, dec, vae.z_dim)
        diff = mu1s[t] - mup
        kl_t = tape.sum(
            logstdp
            - logstd1s[t]
            + (tape.exp(2.0 * logstd1s[t]) + tape.square(diff))
            * tape.exp(-2.0 * logstdp)
            * 0.5
            - 0.5
        )
        kl_z_total = kl_t if kl_z_total is None else kl_z_total + kl_t

    recon_const = n_t * dim_x * 0.5 * LOG_2PI  # per trial
    loss = (0.5 * recon_total + kl_z_total + beta * kl_s) * (1.0 / batch) + recon_const
    recon_sq_mean = recon_total.item() / (n_t * batch * dim_x)
    return _ElboAux(loss=loss, recon_sq_mean=recon_sq_mean, elbo=-loss.item())


def av_elbo(vae: HierarchicalVae, trial: TrialRecord, beta: float) -> float:
    """Negated ELBO of one completed trial, at its stored noise draws."""
    if trial.h is None or trial.eps_s is None:
        raise ValueError("trial must be completed (run complete_trial) first")
    xs = [x[None, :] for x in trial.glimpses]
    ls = [l[None, :] for l in trial.locations]
    eps = [e[None, :] for e in trial.eps_z]
    tape = Tape()
    aux = _build_elbo(tape, vae, xs, ls, eps, trial.eps_s[None, :], beta)
    return aux.loss.item()


@dataclass
class ValueNoise:
    """Frozen draws for the MC value: one row set per MC sample so the
    estimator's variance scales as 1/K."""

    eps_s: np.ndarray  # (K, B, s_dim)
    eps_zp: np.ndarray  # (K, B, z_dim)
    eps_re: np.ndarray  # (K, B, z_dim)
    eps_l: np.ndarray  # (B, 2)

    @property
    def k(self) -> int:
        return self.eps_s.shape[0]


def draw_value_noise(
    vae: HierarchicalVae, k: int, batch: int, rng: np.random.Generator
) -> ValueNoise:
    return ValueNoise(
        eps_s=rng.standard_normal((k, batch, vae.s_dim)),
        eps_zp=rng.standard_normal((k, batch, vae.z_dim)),
        eps_re=rng.standard_normal((k, batch, vae.z_dim)),
        eps_l=rng.standard_normal((batch, 2)),
    )


def _build_value(
    tape: Tape,
    vae: HierarchicalVae,
    h: np.ndarray,
    l_node: Node,
    noise: ValueNoise,
) -> Node:
    """Mean over the batch of H(q2 now) - (1/K) sum_k H(q2 after seeing a
    decoded glimpse at l). The (D/2) log(2 pi e) entropy constants cancel
    between the two terms and are dropped."""
    batch = h.shape[0]
    h_node = tape.const(h)
    mu2, logstd2 = _heads(tape, vae.f2_enc.forward(tape, h_node), vae.s_dim)
    current_ent = tape.sum(logstd2)

    future = None
    for k in range(noise.k):
        s_k = mu2 + tape.exp(logstd2) * tape.const(noise.eps_s[k])
        dec = vae.f2_dec.forward(tape, tape.concat([s_k, l_node]))
        mup, logstdp = _heads(tape, dec, vae.z_dim)
        z_prime = mup + tape.exp(logstdp) * tape.const(noise.eps_zp[k])
        x_k = vae.f1_dec.forward(tape, z_prime)
        enc = vae.f1_enc.forward(tape, tape.concat([x_k, l_node]))
        mu1k, logstd1k = _heads(tape, enc, vae.z_dim)
        z_k = mu1k + tape.exp(logstd1k) * tape.const(noise.eps_re[k])
        out2 = vae.f2_enc.forward(tape, h_node + z_k)
        logstd2k = tape.slice_cols(out2, vae.s_dim, 2 * vae.s_dim) * 0.5
        ent_k = tape.sum(logstd2k)
        future = ent_k if future is None else future + ent_k

    return (current_ent - future * (1.0 / noise.k)) * (1.0 / batch)


def approx_value(
    vae: HierarchicalVae,
    trial: TrialRecord,
    l,
    k: int,
    rng: np.random.Generator | None = None,
    noise: ValueNoise | None = None,
) -> float:
    """MC estimate of the information gained by fixating at l next."""
    if trial.h is None:
        raise ValueError("trial has no fixations yet")
    if noise is None:
        if rng is None:
            raise ValueError("need an rng or explicit noise")
        noise = draw_value_noise(vae, k, 1, rng)
    tape = Tape()
    l_node = tape.const(np.asarray(l, dtype=np.float64).reshape(1, 2))
    value = _build_value(tape, vae, trial.h[None, :], l_node, noise)
    return value.item()


def _bas_select_batch(
    vae: HierarchicalVae,
    action_net: DenseNet,
    action_opt: Optimizer | None,
    h: np.ndarray,
    k: int,
    sigma_action: float,
    rng: np.random.Generator,
    update: bool = True,
) -> np.ndarray:
    """Sample locations from the action net's Gaussian, then (optionally)
    take one ascent step on the MC value with frozen noise. Returns the
    executed locations (B, 2)."""
    batch = h.shape[0]
    s_feat = vae.encode_high(h)[0]
    noise = draw_value_noise(vae, k, batch, rng)
    tape = Tape()
    l_mean = action_net.forward(tape, tape.const(s_feat))
    l_node = tape.clamp(l_mean + sigma_action * tape.const(noise.eps_l), -1.0, 1.0)
    executed = np.array(l_node.value)
    if update:
        value = _build_value(tape, vae, h, l_node, noise)
        grads = tape.backward(-value)
        if action_opt is not None:
            action_opt.step(grads)
    return executed


def bas_select(
    vae: HierarchicalVae,
    action_net: DenseNet,
    trial: TrialRecord,
    k: int,
    rng: np.random.Generator,
    sigma_action: float = 0.15,
    action_opt: Optimizer | None = None,
) -> np.ndarray:
    """Single-trial action selection; updates the action net when an
    optimizer is supplied."""
    if trial.h is None:
        raise ValueError("trial has no fixations yet")
    locs = _bas_select_batch(
        vae,
        action_net,
        action_opt,
        trial.h[None, :],
        k,
        sigma_action,
        rng,
        update=action_opt is not None,
    )
    return locs[0]


# ---------------------------------------------------------------------------
# generation and classification
# ---------------------------------------------------------------------------


def central_grid(image_size: int, d: int, n: int = 3) -> list[np.ndarray]:
    """Normalized locations of an n x n tiling of d-pixel patches around
    the image center."""
    start = (image_size - n * d) // 2
    locs = []
    for i in range(n):
        for j in range(n):
            cr = start + i * d + d // 2
            cc = start + j * d + d // 2
            locs.append(
                np.array([2.0 * cr / (image_size - 1) - 1.0, 2.0 * cc / (image_size - 1) - 1.0])
            )
    return locs


def generate_stitched(
    vae: HierarchicalVae,
    s: np.ndarray,
    locations,
    patch_dim: int,
    image_shape: tuple[int, int],
    rng: np.random.Generator,
) -> np.ndarray:
    """Decode a patch at every query location and mosaic them onto a
    canvas, averaging overlaps. Only the center-scale block of each
    decoded glimpse is placed."""
    h, w = image_shape
    acc = np.zeros(image_shape)
    cnt = np.zeros(image_shape)
    s = np.asarray(s, dtype=np.float64)
    for l in locations:
        l = np.asarray(l, dtype=np.float64).reshape(2)
        mu, log_std = vae.decode_high(np.concatenate([s, l]))
        z = mu + np.exp(log_std) * rng.standard_normal(vae.z_dim)
        patch = vae.f1_dec.apply(z)[: patch_dim * patch_dim].reshape(patch_dim, patch_dim)
        cr, cc = center_pixel(l, image_shape)
        r0, c0 = cr - patch_dim // 2, cc - patch_dim // 2
        rs, re = max(r0, 0), min(r0 + patch_dim, h)
        cs, ce = max(c0, 0), min(c0 + patch_dim, w)
        if rs < re and cs < ce:
            acc[rs:re, cs:ce] += patch[rs - r0 : re - r0, cs - c0 : ce - c0]
            cnt[rs:re, cs:ce] += 1.0
    out = np.zeros(image_shape)
    covered = cnt > 0
    out[covered] = acc[covered] / cnt[covered]
    return np.clip(out, 0.0, 1.0)


def classify(decision_net: DenseNet, s_feat: np.ndarray) -> np.ndarray:
    """Logits for one feature vector or a batch of rows."""
    return decision_net.apply(s_feat)


def train_classifier(
    decision_net: DenseNet,
    optimizer: Optimizer,
    features: np.ndarray,
    labels: np.ndarray,
) -> float:
    """One cross-entropy step on the decision net alone; returns the mean
    loss. Labels outside the logit range raise."""
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n_classes = decision_net.sizes[-1]
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise ValueError("label out of range")
    onehot = np.zeros((labels.size, n_classes))
    onehot[np.arange(labels.size), labels] = 1.0
    tape = Tape()
    logits = decision_net.forward(tape, tape.const(features))
    loss = tape.softmax_cross_entropy(logits, onehot) * (1.0 / labels.size)
    grads = tape.backward(loss)
    optimizer.step(grads)
    return loss.item()


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class AvRunLog:
    """Per-epoch metric rows; epoch 0 is the pre-training evaluation."""

    strategy: str
    seed: int
    rows: list = field(default_factory=list)  # (epoch, elbo, recon_mse, accuracy|None)

    HEADER = ("epoch", "elbo", "recon_mse", "accuracy", "strategy", "seed")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.HEADER)
            for epoch, elbo, mse, acc in self.rows:
                acc_str = "" if acc is None else repr(acc)
                writer.writerow([epoch, repr(elbo), repr(mse), acc_str, self.strategy, self.seed])


@dataclass
class AvRunResult:
    vae: HierarchicalVae
    action_net: DenseNet
    decision_net: DenseNet
    log: AvRunLog


def _rollout_batch(
    vae: HierarchicalVae,
    action_net: DenseNet,
    action_opt: Optimizer | None,
    images: np.ndarray,
    config: AvConfig,
    rng: np.random.Generator,
    use_bas: bool,
    sample_z: bool,
):
    """Run a batch of trials; returns stacked glimpses, locations, z-noise,
    and the final code sum. The first fixation is always uniform."""
    spec = config.foveation
    batch = images.shape[0]
    xs, ls, eps_z = [], [], []
    h = np.zeros((batch, vae.z_dim))
    for t in range(config.n_fixations):
        if t == 0 or not use_bas:
            locs = rng.uniform(-1.0, 1.0, size=(batch, 2))
        else:
            locs = _bas_select_batch(
                vae,
                action_net,
                action_opt,
                h,
                config.mc_samples,
                config.sigma_action,
                rng,
                update=action_opt is not None,
            )
        x = np.stack([foveate(images[i], locs[i], spec).x for i in range(batch)])
        mu, log_std = vae.encode_low(np.concatenate([x, locs], axis=-1))
        if sample_z:
            eps = rng.standard_normal((batch, vae.z_dim))
            z = mu + np.exp(log_std) * eps
        else:
            eps = np.zeros((batch, vae.z_dim))
            z = mu
        h = h + z
        xs.append(x)
        ls.append(locs)
        eps_z.append(eps)
    return xs, ls, eps_z, h


def _epoch_metrics(losses, mses, accs):
    elbo = -float(np.mean(losses))
    mse = float(np.mean(mses))
    acc = None if not accs else float(np.mean(accs))
    return elbo, mse, acc


def run_av_training(
    config: AvConfig,
    corpus: ImageCorpus,
    train_decision: bool = True,
) -> AvRunResult:
    """Unsupervised perception training with the configured strategy.

    Random-fixation pre-training epochs come first; afterwards the
    strategy drives fixations 2..T (the first is always uniform) and, for
    'bas', every selection takes one ascent step on the MC value. An
    optional decision net is co-trained on eval-mode features; its
    gradients never touch perception or action parameters.
    """
    rng = np.random.default_rng(config.seed)
    vae = HierarchicalVae(config, rng)
    action_net = build_action_net(config, rng)
    decision_net = build_decision_net(config, corpus.n_classes, rng)
    perception_opt = Optimizer(vae.params, kind="adam", lr=config.perception_lr)
    action_opt = Optimizer(action_net.params, kind="adam", lr=config.action_lr)
    decision_opt = Optimizer(decision_net.params, kind="adam", lr=config.decision_lr)
    log = AvRunLog(strategy=config.strategy, seed=config.seed)

    n = len(corpus)
    batch_size = min(config.batch_size, n)

    # epoch 0: evaluation-only baseline row
    idx = rng.permutation(n)[:batch_size]
    xs, ls, eps_z, h = _rollout_batch(
        vae, action_net, None, corpus.images[idx], config, rng, use_bas=False, sample_z=True
    )
    tape = Tape()
    aux = _build_elbo(tape, vae, xs, ls, eps_z, rng.standard_normal((len(idx), vae.s_dim)), config.beta)
    log.rows.append((0, -aux.loss.item(), aux.recon_sq_mean, None))

    total_epochs = config.pretrain_epochs + config.train_epochs
    for epoch in range(1, total_epochs + 1):
        pretraining = epoch <= config.pretrain_epochs
        use_bas = config.strategy == "bas" and not pretraining
        order = rng.permutation(n)
        losses, mses, accs = [], [], []
        for start in range(0, n - batch_size + 1, batch_size):
            batch_idx = order[start : start + batch_size]
            images = corpus.images[batch_idx]
            xs, ls, eps_z, h = _rollout_batch(
                vae,
                action_net,
                action_opt if use_bas else None,
                images,
                config,
                rng,
                use_bas=use_bas,
                sample_z=True,
            )
            eps_s = rng.standard_normal((len(batch_idx), vae.s_dim))
            tape = Tape()
            aux = _build_elbo(tape, vae, xs, ls, eps_z, eps_s, config.beta)
            grads = tape.backward(aux.loss)
            perception_opt.step(grads)
            losses.append(aux.loss.item())
            mses.append(aux.recon_sq_mean)

            if train_decision and not pretraining:
                # eval-mode features from the same glimpse sequence
                h_eval = np.zeros((len(batch_idx), vae.z_dim))
                for t in range(config.n_fixations):
                    mu, _ = vae.encode_low(np.concatenate([xs[t], ls[t]], axis=-1))
                    h_eval += mu
                feats = vae.encode_high(h_eval)[0]
                labels = corpus.labels[batch_idx]
                train_classifier(decision_net, decision_opt, feats, labels)
                accs.append(float(np.mean(np.argmax(classify(decision_net, feats), axis=-1) == labels)))

        log.rows.append((epoch, *(_epoch_metrics(losses, mses, accs))))

    return AvRunResult(vae=vae, action_net=action_net, decision_net=decision_net, log=log)


def collect_features(
    result: AvRunResult,
    corpus: ImageCorpus,
    config: AvConfig,
    rng: np.random.Generator,
    strategy: str | None = None,
):
    """Eval-mode features E[q2(s)] plus the fixation locations for every
    corpus image, without updating any parameters."""
    strategy = strategy or config.strategy
    feats = np.zeros((len(corpus), config.s_dim))
    locations = []
    batch_size = min(config.batch_size, len(corpus))
    for start in range(0, len(corpus), batch_size):
        images = corpus.images[start : start + batch_size]
        xs, ls, _, h = _rollout_batch(
            result.vae,
            result.action_net,
            None,
            images,
            config,
            rng,
            use_bas=strategy == "bas",
            sample_z=False,
        )
        feats[start : start + images.shape[0]] = result.vae.encode_high(h)[0]
        locations.append(ls)
    return feats, locations


def evaluate_accuracy(
    result: AvRunResult,
    corpus: ImageCorpus,
    config: AvConfig,
    rng: np.random.Generator,
    strategy: str | None = None,
) -> float:
    """Classification accuracy of the decision net on fresh eval trials."""
    feats, _ = collect_features(result, corpus, config, rng, strategy)
    preds = np.argmax(classify(result.decision_net, feats), axis=-1)
    return float(np.mean(preds == corpus.labels))
