"""Transformer autoencoder over windowed ACE segments.

embed (A -> D) + learned positions -> 3 encoder blocks -> 2 decoder blocks ->
output affine (D -> A).  Every block computes

    B   = MultiAttn(LayerNorm(A_in))
    out = Dense(LayerNorm(B + A_in)) + B + A_in

where Dense is hidden affine -> GELU -> affine.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .optim import AdamState, NonFiniteGradient, WarmupSchedule, adam_step, lr_at

log = logging.getLogger(__name__)

LOSS_KINDS = ("sme", "mae", "mse")
POOLING_MODES = ("mean", "flatten")
INIT_STD = 0.02
LN_EPS = 1e-5


@dataclass(frozen=True)
class PowerBertConfig:
    ws: int = 20
    areas: int = 5
    dim: int = 32
    heads: int = 4
    encoder_blocks: int = 3
    decoder_blocks: int = 2
    ff_hidden: int = 64

    def __post_init__(self):
        if self.dim < self.areas:
            raise ValueError(f"embedding width {self.dim} must be >= input channels {self.areas}")
        if self.dim % self.heads:
            raise ValueError(f"embedding width {self.dim} not divisible by {self.heads} heads")
        if min(self.ws, self.areas, self.encoder_blocks, self.ff_hidden) < 1 or self.decoder_blocks < 0:
            raise ValueError("invalid model size")


@dataclass(frozen=True)
class LossSpec:
    kind: str = "sme"
    k: float = 1.5

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"loss kind must be one of {LOSS_KINDS}, got {self.kind!r}")
        if self.k <= 0:
            raise ValueError("SME threshold multiplier must be positive")


Params = dict[str, T.Tensor]


def block_names(prefix: str) -> list[str]:
    return [f"{prefix}.{n}" for n in (
        "ln1.g", "ln1.b", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv",
        "attn.wo", "attn.bo", "ln2.g", "ln2.b", "ff.w1", "ff.b1", "ff.w2", "ff.b2",
    )]


def param_shapes(cfg: PowerBertConfig) -> dict[str, tuple[int, ...]]:
    d, h = cfg.dim, cfg.ff_hidden
    shapes = {"embed.w": (cfg.areas, d), "embed.b": (d,), "pos": (cfg.ws, d)}
    prefixes = [f"enc{i}" for i in range(cfg.encoder_blocks)] + [f"dec{i}" for i in range(cfg.decoder_blocks)]
    for p in prefixes:
        for name in block_names(p):
            leaf = name.split(".", 1)[1]
            if leaf.startswith("ln"):
                shapes[name] = (d,)
            elif leaf == "ff.w1":
                shapes[name] = (d, h)
            elif leaf == "ff.b1":
                shapes[name] = (h,)
            elif leaf == "ff.w2":
                shapes[name] = (h, d)
            elif ".w" in leaf:
                shapes[name] = (d, d)
            else:
                shapes[name] = (d,)
    shapes["out.w"] = (d, cfg.areas)
    shapes["out.b"] = (cfg.areas,)
    return shapes


def init_params(cfg: PowerBertConfig, seed: int = 0) -> Params:
    """Affine weights and positions ~ N(0, 0.02); biases 0; layer-norm gains 1."""
    rng = np.random.default_rng([seed, 21])
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name.endswith(".g"):
            data = np.ones(shape)
        elif leaf.startswith("w") or name == "pos":
            data = rng.normal(0.0, INIT_STD, size=shape)
        else:
            data = np.zeros(shape)
        params[name] = T.Tensor(data, requires_grad=True, name=name)
    return params


def _block(x: T.Tensor, p: Params, prefix: str, heads: int) -> T.Tensor:
    g = lambda n: p[f"{prefix}.{n}"]
    b = T.multi_head_attention(
        T.layer_norm(x, g("ln1.g"), g("ln1.b"), LN_EPS),
        g("attn.wq"), g("attn.bq"), g("attn.wk"), g("attn.bk"),
        g("attn.wv"), g("attn.bv"), g("attn.wo"), g("attn.bo"), heads,
    )
    res = T.add(b, x)
    hidden = T.gelu(T.dense(T.layer_norm(res, g("ln2.g"), g("ln2.b"), LN_EPS), g("ff.w1"), g("ff.b1")))
    return T.add(T.dense(hidden, g("ff.w2"), g("ff.b2")), res)


def _check_input(x: np.ndarray | T.Tensor, cfg: PowerBertConfig, what: str, width: int) -> T.Tensor:
    x = T.as_tensor(x)
    if x.data.ndim == 2:
        x = T.reshape(x, (1,) + x.shape)
    if x.data.ndim != 3 or x.shape[1:] != (cfg.ws, width):
        raise T.ShapeError(f"{what}: expected (batch, {cfg.ws}, {width}), got {x.shape}")
    return x


def embed(params: Params, cfg: PowerBertConfig, segments) -> T.Tensor:
    x = _check_input(segments, cfg, "embed", cfg.areas)
    return T.add(T.dense(x, params["embed.w"], params["embed.b"]), params["pos"])


def encode(params: Params, cfg: PowerBertConfig, segments, upto: int | None = None) -> T.Tensor:
    """(batch, ws, A) -> (batch, ws, D) after the first ``upto`` encoder blocks (all by default)."""
    h = embed(params, cfg, segments)
    for i in range(cfg.encoder_blocks if upto is None else upto):
        h = _block(h, params, f"enc{i}", cfg.heads)
    return h


def decode(params: Params, cfg: PowerBertConfig, latent) -> T.Tensor:
    h = _check_input(latent, cfg, "decode", cfg.dim)
    for i in range(cfg.decoder_blocks):
        h = _block(h, params, f"dec{i}", cfg.heads)
    return T.dense(h, params["out.w"], params["out.b"])


def reconstruct(params: Params, cfg: PowerBertConfig, segments) -> T.Tensor:
    return decode(params, cfg, encode(params, cfg, segments))


# ----------------------------------------------------------------------- loss

@dataclass
class LossResult:
    loss: T.Tensor
    small: np.ndarray          # bool mask, e <= threshold
    large: np.ndarray          # bool mask, e > threshold
    threshold: float
    small_mean: float
    large_mean: float

    @property
    def large_fraction(self) -> float:
        return float(self.large.mean())

    @property
    def value(self) -> float:
        return float(self.loss.data)


def sme_value(errors, k: float = 1.5) -> float:
    """Separate mean error of absolute errors: mean(e <= k*mean) + mean(e > k*mean).
    An empty group contributes 0."""
    e = np.abs(np.asarray(errors, dtype=float)).ravel()
    thr = k * e.mean()
    small, large = e[e <= thr], e[e > thr]
    return (small.mean() if small.size else 0.0) + (large.mean() if large.size else 0.0)


def loss_fn(recon: T.Tensor, target, spec: LossSpec) -> LossResult:
    """Reconstruction loss.  For SME the groups and the threshold come from
    the forward values and are held constant in the backward pass."""
    target = T.as_tensor(target)
    if recon.shape != target.shape:
        raise T.ShapeError(f"loss: reconstruction {recon.shape} vs target {target.shape}")
    diff = T.sub(recon, target)
    e = T.abs_(diff)
    ev = e.data
    thr = spec.k * float(ev.mean())
    small = ev <= thr
    large = ~small
    n_s, n_l = int(small.sum()), int(large.sum())
    s_mean = float(ev[small].mean()) if n_s else 0.0
    l_mean = float(ev[large].mean()) if n_l else 0.0
    if spec.kind == "mae":
        loss = T.mean(e)
    elif spec.kind == "mse":
        loss = T.mean(T.square(diff))
    else:
        weights = np.where(small, 1.0 / max(n_s, 1), 1.0 / max(n_l, 1))
        loss = T.sum_(T.mul(e, weights))
    return LossResult(loss, small, large, thr, s_mean, l_mean)


# ------------------------------------------------------------------- training

@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    warmup_steps: int = 100
    drop_last: bool = False


@dataclass
class HistoryRow:
    step: int
    lr: float
    loss: float
    small_mean: float
    large_mean: float
    large_fraction: float


@dataclass
class PretrainResult:
    params: Params
    history: list[HistoryRow]
    adam: AdamState
    epoch_losses: list[float] = field(default_factory=list)
    validation_losses: list[float] = field(default_factory=list)


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, last_good: Params, history: list[HistoryRow]):
        super().__init__(msg)
        self.last_good = last_good
        self.history = history


def clone_params(params: Params) -> Params:
    return {n: T.Tensor(t.data.copy(), requires_grad=True, name=n) for n, t in params.items()}


def pretrain(
    segments: np.ndarray,
    cfg: PowerBertConfig,
    loss_spec: LossSpec = LossSpec(),
    train: TrainConfig = TrainConfig(),
    seed: int = 0,
    params: Params | None = None,
    adam: AdamState | None = None,
    validation: np.ndarray | None = None,
) -> PretrainResult:
    """Adam with linear warmup over shuffled mini-batches; deterministic in ``seed``.

    Passing ``params``/``adam`` from a checkpoint resumes training, including
    the step count that drives the warmup.
    """
    x = np.asarray(segments, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("pretrain needs at least one segment")
    if train.drop_last and train.batch_size > len(x):
        raise ValueError(f"batch size {train.batch_size} exceeds {len(x)} segments with drop_last")
    params = params if params is not None else init_params(cfg, seed)
    adam = adam or AdamState()
    rng = np.random.default_rng([seed, 22])
    n_batches = len(x) // train.batch_size if train.drop_last else -(-len(x) // train.batch_size)
    schedule = WarmupSchedule(train.lr, train.warmup_steps, max(1, adam.step_count + train.epochs * n_batches))
    history: list[HistoryRow] = []
    epoch_losses, val_losses = [], []
    last_good = clone_params(params)
    for epoch in range(train.epochs):
        order = rng.permutation(len(x))
        losses = []
        for b in range(n_batches):
            idx = order[b * train.batch_size:(b + 1) * train.batch_size]
            for p in params.values():
                p.zero_grad()
            res = loss_fn(reconstruct(params, cfg, x[idx]), x[idx], loss_spec)
            if not np.isfinite(res.value):
                raise TrainingDiverged(f"non-finite loss at step {adam.step_count}", last_good, history)
            T.backward(res.loss)
            lr = lr_at(schedule, adam.step_count + 1)
            try:
                adam_step({n: p.data for n, p in params.items()}, {n: p.grad for n, p in params.items()}, adam, lr)
            except NonFiniteGradient as exc:
                raise TrainingDiverged(str(exc), last_good, history) from exc
            history.append(HistoryRow(adam.step_count, lr, res.value, res.small_mean, res.large_mean, res.large_fraction))
            losses.append(res.value)
        last_good = clone_params(params)
        epoch_losses.append(float(np.mean(losses)))
        if validation is not None and len(validation):
            val_losses.append(evaluate_loss(params, cfg, validation, loss_spec))
        log.debug("epoch %d loss %.5f", epoch, epoch_losses[-1])
    for p in params.values():
        p.zero_grad()
    return PretrainResult(params, history, adam, epoch_losses, val_losses)


def evaluate_loss(params: Params, cfg: PowerBertConfig, segments: np.ndarray, spec: LossSpec, batch: int = 512) -> float:
    with T.no_grad():
        vals = []
        for i in range(0, len(segments), batch):
            chunk = segments[i:i + batch]
            vals.append(loss_fn(reconstruct(params, cfg, chunk), chunk, spec).value * len(chunk))
    return float(np.sum(vals) / len(segments))


# ----------------------------------------------------------------- features

def pool(latent: np.ndarray, mode: str = "mean") -> np.ndarray:
    if mode == "mean":
        return latent.mean(axis=1)
    if mode == "flatten":
        return latent.reshape(len(latent), -1)
    raise ValueError(f"unknown pooling mode {mode!r}; expected one of {POOLING_MODES}")


def extract_features(params: Params, cfg: PowerBertConfig, segments, pooling: str = "mean", batch: int = 1024) -> np.ndarray:
    """Encoder output pooled over time: (N, D) for mean, (N, ws*D) for flatten."""
    if pooling not in POOLING_MODES:
        raise ValueError(f"unknown pooling mode {pooling!r}; expected one of {POOLING_MODES}")
    x = np.asarray(segments, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    out = []
    with T.no_grad():
        for i in range(0, len(x), batch):
            out.append(pool(encode(params, cfg, x[i:i + batch]).data, pooling))
    feats = np.concatenate(out) if out else np.zeros((0, cfg.dim))
    return feats[0] if single else feats


# --------------------------------------------------------------- checkpoints

def params_hash(params: Params) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data, dtype="<f4").tobytes())
    return h.hexdigest()[:16]


def save_model(path, params: Params, cfg: PowerBertConfig, adam: AdamState | None = None, meta: dict | None = None) -> None:
    arrays = {n: p.data for n, p in params.items()}
    info = {"model": asdict(cfg), "step_count": 0, **(meta or {})}
    if adam is not None:
        info["step_count"] = adam.step_count
        info["adam"] = {"beta1": adam.beta1, "beta2": adam.beta2, "epsilon": adam.epsilon}
        for n in params:
            if n in adam.first_moment:
                arrays[f"adam.m.{n}"] = adam.first_moment[n]
                arrays[f"adam.v.{n}"] = adam.second_moment[n]
    save_checkpoint(path, arrays, info)


def load_model(path) -> tuple[Params, PowerBertConfig, AdamState, dict]:
    arrays, meta = load_checkpoint(path)
    cfg = PowerBertConfig(**meta["model"])
    expected = param_shapes(cfg)
    params = {}
    for name, shape in expected.items():
        if name not in arrays or arrays[name].shape != shape:
            raise CheckpointError(f"{path}: parameter {name} missing or mis-shaped")
        params[name] = T.Tensor(arrays[name], requires_grad=True, name=name)
    adam = AdamState(step_count=int(meta.get("step_count", 0)), **meta.get("adam", {}))
    for name in expected:
        if f"adam.m.{name}" in arrays:
            adam.first_moment[name] = arrays[f"adam.m.{name}"].copy()
            adam.second_moment[name] = arrays[f"adam.v.{name}"].copy()
    return params, cfg, adam, meta
