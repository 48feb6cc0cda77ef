"""Sparse-binary-representation knowledge tracing model.

Each exercise gets a learned code of M entries: a linear map of its
embedding is quantized to two learnable levels (alpha for presence, beta
for absence) with at most C_max active bits, trained end to end through a
straight-through estimator. The code is concatenated with the human KC
multi-hot, labeled with correctness, projected, and fed to an LSTM; the
prediction is sigma(u_t . o_{t-1}) so step t never sees its own label.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Node

__all__ = [
    "VARIANTS",
    "SBRKTConfig",
    "SBRKTParams",
    "QuantizerOutput",
    "embed_exercise",
    "quantize",
    "quantize_variant",
    "step_input",
    "forward_batch",
    "sbrkt_loss",
    "SBRKTModel",
    "train_sbrkt",
    "TrainingDiverged",
    "TrainLogEntry",
    "alpha_beta",
]

VARIANTS = ("alphabeta", "tanh", "zeroone", "dense")


@dataclass(frozen=True)
class SBRKTConfig:
    num_kcs: int  # N, human KC count
    num_aux: int = 32  # M, auxiliary KC count
    embed_dim: int = 32  # d
    c_max: int = 4  # max active aux KCs per question
    proj_dim: int = 128  # D
    hidden_dim: int = 128  # H
    level_scale: float = 1.0  # c
    variant: str = "alphabeta"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if not (1 <= self.c_max <= self.num_aux):
            raise ValueError(f"need 1 <= c_max <= num_aux, got {self.c_max} vs {self.num_aux}")
        for name in ("num_kcs", "num_aux", "embed_dim", "proj_dim", "hidden_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.level_scale <= 0:
            raise ValueError("level_scale must be positive")


@dataclass
class SBRKTParams:
    """All trainable arrays; `x_ex` has one extra row shared by questions
    unseen at training time."""

    x_ex: Node  # [Q+1, d]
    w_code: Node  # [M, d]
    b_code: Node  # [M]
    p_alpha: Node  # scalar
    p_beta: Node  # scalar
    w_proj: Node  # [D, 2N+2M]
    lstm: ad.LSTMParams
    w_out: Node  # [N+M, H]
    b_out: Node  # [N+M]

    def named(self) -> dict:
        return {
            "x_ex": self.x_ex,
            "w_code": self.w_code,
            "b_code": self.b_code,
            "p_alpha": self.p_alpha,
            "p_beta": self.p_beta,
            "w_proj": self.w_proj,
            "lstm.w_x": self.lstm.w_x,
            "lstm.w_h": self.lstm.w_h,
            "lstm.b": self.lstm.b,
            "w_out": self.w_out,
            "b_out": self.b_out,
        }

    def snapshot(self) -> dict:
        return {name: node.value.copy() for name, node in self.named().items()}

    def restore(self, snap: dict) -> None:
        for name, node in self.named().items():
            node.value[...] = snap[name]

    @staticmethod
    def init(config: SBRKTConfig, num_questions: int, rng: np.random.Generator) -> "SBRKTParams":
        n, m, d = config.num_kcs, config.num_aux, config.embed_dim
        dd, hh = config.proj_dim, config.hidden_dim
        in_dim = 2 * n + 2 * m

        def uniform(shape, fan_in, name):
            bound = 1.0 / np.sqrt(fan_in)
            return ad.parameter(rng.uniform(-bound, bound, size=shape), name)

        return SBRKTParams(
            x_ex=ad.parameter(rng.normal(0.0, 0.1, size=(num_questions + 1, d)), "x_ex"),
            w_code=uniform((m, d), d, "w_code"),
            b_code=ad.parameter(np.zeros(m), "b_code"),
            p_alpha=ad.parameter(0.0, "p_alpha"),
            p_beta=ad.parameter(0.0, "p_beta"),
            w_proj=uniform((dd, in_dim), in_dim, "w_proj"),
            lstm=ad.LSTMParams.init(dd, hh, rng),
            w_out=uniform((n + m, hh), hh, "w_out"),
            b_out=ad.parameter(np.zeros(n + m), "b_out"),
        )


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def alpha_beta(p_alpha: float, p_beta: float, c: float = 1.0):
    """Quantizer levels: alpha in (c, 2c), beta in (0, c), so alpha > beta."""
    return c * (1.0 + _sigmoid(p_alpha)), c * _sigmoid(p_beta)


def embed_exercise(q, params: SBRKTParams) -> Node:
    """Latent code pre-activation e = W x_ex[q] + b for indices q."""
    x = ad.gather_rows(params.x_ex, q)
    return ad.affine(params.w_code, x, params.b_code)


@dataclass
class QuantizerOutput:
    u: Node  # code vector fed downstream (codomain depends on variant)
    q_bits: np.ndarray  # binary, popcount <= c_max (None for dense)
    mask: np.ndarray  # top-c_max mask (None for dense)


def _topk_mask(e_val: np.ndarray, c_max: int) -> np.ndarray:
    """Mask of the c_max largest entries per row; ties go to lower indices."""
    flat = e_val[None, :] if e_val.ndim == 1 else e_val
    # stable sort on -value keeps the lower index first among equals
    order = np.argsort(-flat, axis=-1, kind="stable")
    mask = np.zeros_like(flat)
    np.put_along_axis(mask, order[..., :c_max], 1.0, axis=-1)
    return mask.reshape(e_val.shape)


def quantize(e: Node, p_alpha: Node, p_beta: Node, c_max: int, c: float = 1.0) -> QuantizerOutput:
    """Two-level quantizer with straight-through gradients.

    Forward: q = 1[e > 0] masked to the top-c_max entries, u = q*alpha +
    (1-q)*beta. Backward treats the discretization as identity, so every
    coordinate of e receives g*(alpha - beta); the level parameters get the
    q-partitioned gradient sums through their sigmoid parametrizations.
    """
    e_val = e.value
    if c_max > e_val.shape[-1]:
        raise ValueError(f"c_max={c_max} exceeds code length {e_val.shape[-1]}")
    mask = _topk_mask(e_val, c_max)
    q_bits = ((e_val > 0) * mask).astype(np.float64)
    assert q_bits.sum(axis=-1).max(initial=0.0) <= c_max
    alpha, beta = alpha_beta(float(p_alpha.value), float(p_beta.value), c)
    u_val = q_bits * alpha + (1.0 - q_bits) * beta

    sa = _sigmoid(float(p_alpha.value))
    sb = _sigmoid(float(p_beta.value))

    def bw(g):
        e.grad += g * (alpha - beta)
        p_alpha.grad += (g * q_bits).sum() * c * sa * (1.0 - sa)
        p_beta.grad += (g * (1.0 - q_bits)).sum() * c * sb * (1.0 - sb)

    u = ad._make(u_val, (e, p_alpha, p_beta), bw)
    return QuantizerOutput(u=u, q_bits=q_bits, mask=mask)


def quantize_backward(g, qout: QuantizerOutput, p_alpha: float, p_beta: float, c: float = 1.0):
    """Closed-form STE gradients of the two-level quantizer.

    Returns (d_e, d_p_alpha, d_p_beta) for upstream gradient g. This is the
    same arithmetic the quantize() tape closure performs.
    """
    g = np.asarray(g, dtype=np.float64)
    alpha, beta = alpha_beta(p_alpha, p_beta, c)
    sa, sb = _sigmoid(p_alpha), _sigmoid(p_beta)
    d_e = g * (alpha - beta)
    d_pa = float((g * qout.q_bits).sum()) * c * sa * (1.0 - sa)
    d_pb = float((g * (1.0 - qout.q_bits)).sum()) * c * sb * (1.0 - sb)
    return d_e, d_pa, d_pb


def quantize_variant(e: Node, config: SBRKTConfig) -> QuantizerOutput:
    """Ablation quantizers: tanh (+1/-1), zeroone (0/1), dense (identity)."""
    if config.variant == "dense":
        return QuantizerOutput(u=e, q_bits=None, mask=None)
    e_val = e.value
    mask = _topk_mask(e_val, config.c_max)
    if config.variant == "tanh":
        # +1 where tanh(e) > 0 and selected, else -1 (the absence pole);
        # STE keeps the tanh gradient.
        q_bits = ((e_val > 0) * mask).astype(np.float64)
        u_val = 2.0 * q_bits - 1.0
        t = np.tanh(e_val)

        def bw(g):
            e.grad += g * (1.0 - t * t)

    elif config.variant == "zeroone":
        # sigma(e) >= 0.5 (i.e. e >= 0) thresholded, masked; sigmoid grad kept.
        q_bits = ((e_val >= 0) * mask).astype(np.float64)
        u_val = q_bits.copy()
        s = _sigmoid(e_val)

        def bw(g):
            e.grad += g * s * (1.0 - s)

    else:
        raise ValueError(f"quantize_variant: unsupported variant {config.variant!r}")
    assert q_bits.sum(axis=-1).max(initial=0.0) <= config.c_max
    u = ad._make(u_val, (e,), bw)
    return QuantizerOutput(u=u, q_bits=q_bits, mask=mask)


def question_code(q, params: SBRKTParams, config: SBRKTConfig) -> QuantizerOutput:
    e = embed_exercise(q, params)
    if config.variant == "alphabeta":
        return quantize(e, params.p_alpha, params.p_beta, config.c_max, config.level_scale)
    return quantize_variant(e, config)


def step_input(u_kc_y: Node, u_ex_y: Node, params: SBRKTParams) -> Node:
    """Project the labeled feature concat to the LSTM input space."""
    v = ad.concat([u_kc_y, u_ex_y], axis=-1)
    if v.value.shape[-1] != params.w_proj.value.shape[1]:
        raise ad.DimensionError(
            f"step_input: features {v.value.shape} vs w_proj {params.w_proj.value.shape}"
        )
    return ad.linear(v, params.w_proj)


def forward_batch(batch, params: SBRKTParams, config: SBRKTConfig, freeze_quantizer=False):
    """Run the model over a padded batch.

    Returns (y_hat values [B, T], loss Node). Prediction at step t uses the
    LSTM state from steps < t only; the labeled vector advances the state
    afterwards. With `freeze_quantizer` the code vectors enter as constants
    (used by the gradient checker, which excludes the STE path).
    """
    b, t_max = batch.q.shape
    hh = config.hidden_dim
    h = ad.constant(np.zeros((b, hh)))
    c = ad.constant(np.zeros((b, hh)))
    yhat_vals = np.zeros((b, t_max))
    loss_num = None
    for t in range(t_max):
        u_kc = batch.kc[:, t, :]
        y = batch.y[:, t]
        if freeze_quantizer:
            with ad.no_grad():
                u_code = ad.constant(question_code(batch.q[:, t], params, config).u.value)
        else:
            u_code = question_code(batch.q[:, t], params, config).u

        o_prev = ad.affine(params.w_out, h, params.b_out)
        u_t = ad.concat([ad.constant(u_kc), u_code], axis=-1)
        yhat = ad.sigmoid(ad.rowsum(ad.mul(u_t, o_prev)))
        yhat_vals[:, t] = yhat.value

        m = batch.loss_mask[:, t]
        if m.sum() > 0:
            step_loss = ad.scale(ad.bce_loss(yhat, y, m), float(m.sum()))
            loss_num = step_loss if loss_num is None else ad.add(loss_num, step_loss)

        ycol = y[:, None]
        u_kc_y = np.concatenate([u_kc * ycol, u_kc * (1.0 - ycol)], axis=-1)
        u_ex_y = ad.concat(
            [ad.mul(u_code, ad.constant(ycol)), ad.mul(u_code, ad.constant(1.0 - ycol))],
            axis=-1,
        )
        z = step_input(ad.constant(u_kc_y), u_ex_y, params)
        h, c = ad.lstm_cell(z, h, c, params.lstm)

    total = batch.loss_mask.sum()
    if loss_num is None:
        raise ValueError("forward_batch: no valid steps in batch")
    loss = ad.scale(loss_num, 1.0 / total)
    return yhat_vals, loss


def sbrkt_loss(batch, params: SBRKTParams, config: SBRKTConfig, freeze_quantizer=False) -> Node:
    return forward_batch(batch, params, config, freeze_quantizer=freeze_quantizer)[1]


def save_model(model: SBRKTModel, path) -> None:
    """Write a self-contained checkpoint (config, vocab, all parameters)."""
    from .checkpoint import save_checkpoint

    cfg = {
        "model": "sbrkt",
        "num_kcs": model.config.num_kcs,
        "num_aux": model.config.num_aux,
        "embed_dim": model.config.embed_dim,
        "c_max": model.config.c_max,
        "proj_dim": model.config.proj_dim,
        "hidden_dim": model.config.hidden_dim,
        "level_scale": model.config.level_scale,
        "variant": model.config.variant,
        "num_questions": model.params.x_ex.value.shape[0] - 1,
    }
    if model.vocab is not None:
        cfg["vocab"] = {"questions": model.vocab.questions, "kcs": model.vocab.kcs}
    save_checkpoint(path, cfg, model.params.snapshot())


def load_model(path) -> SBRKTModel:
    from .checkpoint import CheckpointError, load_checkpoint
    from .data import Vocab

    cfg, arrays = load_checkpoint(path)
    if cfg.get("model") != "sbrkt":
        raise CheckpointError(f"{path}: not an SBRKT checkpoint (model={cfg.get('model')!r})")
    config = SBRKTConfig(
        num_kcs=cfg["num_kcs"],
        num_aux=cfg["num_aux"],
        embed_dim=cfg["embed_dim"],
        c_max=cfg["c_max"],
        proj_dim=cfg["proj_dim"],
        hidden_dim=cfg["hidden_dim"],
        level_scale=cfg["level_scale"],
        variant=cfg["variant"],
    )
    rng = np.random.default_rng(0)
    params = SBRKTParams.init(config, cfg["num_questions"], rng)
    params.restore(arrays)
    vocab = None
    if "vocab" in cfg:
        vocab = Vocab(questions=cfg["vocab"]["questions"], kcs=cfg["vocab"]["kcs"])
    return SBRKTModel(config=config, params=params, vocab=vocab)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"training diverged (non-finite loss) at epoch {epoch}")
        self.epoch = epoch


@dataclass
class TrainLogEntry:
    epoch: int
    train_loss: float
    val_auc: float


@dataclass
class SBRKTModel:
    """Trained parameter snapshot plus everything needed to run it."""

    config: SBRKTConfig
    params: SBRKTParams
    vocab: "object" = None  # data.Vocab; optional for bare-kernel tests

    def predict_batches(self, batches):
        """Pooled (scores, labels) over valid, loss-eligible steps."""
        scores, labels = [], []
        with ad.no_grad():
            for batch in batches:
                yhat, _ = forward_batch(batch, self.params, self.config)
                keep = batch.loss_mask > 0
                scores.append(yhat[keep])
                labels.append(batch.y[keep])
        return np.concatenate(scores), np.concatenate(labels)


def _epoch_batches(batches, rng):
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def train_sbrkt(
    train_batches,
    val_batches,
    config: SBRKTConfig,
    num_questions: int,
    seed: int = 0,
    lr: float = 1e-3,
    max_epochs: int = 200,
    patience: int = 10,
    clip_norm: float = 5.0,
):
    """Adam training with early stopping on validation AUC.

    Keeps the best-validation snapshot; deterministic under `seed`.
    Returns (params, log) where log is a list of TrainLogEntry.
    """
    from .evalkit import safe_auc

    rng = np.random.default_rng(seed)
    params = SBRKTParams.init(config, num_questions, rng)
    opt = ad.Adam(params.named(), lr=lr)
    model = SBRKTModel(config=config, params=params)

    best_auc = -np.inf
    best_snap = params.snapshot()
    since_best = 0
    log = []
    for epoch in range(1, max_epochs + 1):
        losses = []
        weights = []
        for batch in _epoch_batches(train_batches, rng):
            opt.zero_grad()
            loss = sbrkt_loss(batch, params, config)
            if not np.isfinite(loss.value):
                raise TrainingDiverged(epoch)
            ad.backward(loss)
            ad.clip_global_norm(params.named(), clip_norm)
            opt.step()
            losses.append(float(loss.value))
            weights.append(batch.loss_mask.sum())
        train_loss = float(np.average(losses, weights=weights))

        scores, labels = model.predict_batches(val_batches)
        val_auc = safe_auc(scores, labels)
        log.append(TrainLogEntry(epoch=epoch, train_loss=train_loss, val_auc=val_auc))

        if val_auc > best_auc:
            best_auc = val_auc
            best_snap = params.snapshot()
            since_best = 0
        else:
            since_best += 1
            if since_best >= patience:
                break
    params.restore(best_snap)
    return params, log
