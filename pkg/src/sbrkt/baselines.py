"""Classical baselines: BKT with forgetting and DKT with averaged KC embeddings.

BKT is a two-state HMM per KC with five probabilities (L0, T, G, S, F),
kept in logit form and trained by SGD on binary cross-entropy through the
differentiable filtering recurrence. Multi-KC questions are expanded into
one observation per KC; the question-level prediction is the mean of the
per-KC predictions. DKT embeds (KC, label) pairs, averages the rows of a
question's KCs, and runs an LSTM; both models accept aux-augmented data
simply through a larger KC vocabulary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .data import DEFAULT_MAX_LEN, student_order
from .model import TrainingDiverged, TrainLogEntry

__all__ = [
    "BKT_INIT_PROBS",
    "BKTParams",
    "bkt_predict",
    "bkt_observe",
    "bkt_transition",
    "bkt_forward",
    "expand_per_kc",
    "BKTModel",
    "train_bkt",
    "DKTConfig",
    "DKTParams",
    "dkt_forward_batch",
    "DKTModel",
    "train_dkt",
]

# (L0, T, G, S, F) starting probabilities before any training.
BKT_INIT_PROBS = (0.4, 0.2, 0.2, 0.1, 0.05)
_DEN_EPS = 1e-12


def _logit(p):
    return np.log(p / (1.0 - p))


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass
class BKTParams:
    """Logits [K, 5] with columns (L0, T, G, S, F); one row per KC index."""

    logits: Node
    kc_names: list

    @staticmethod
    def init(kc_names) -> "BKTParams":
        row = _logit(np.array(BKT_INIT_PROBS))
        logits = ad.parameter(np.tile(row, (len(kc_names), 1)), "bkt_logits")
        return BKTParams(logits=logits, kc_names=list(kc_names))

    def probs(self) -> np.ndarray:
        """[K, 5] probabilities."""
        return _sigmoid(self.logits.value)

    def export_csv(self) -> str:
        lines = ["kc_id,L0,T,G,S,F"]
        probs = self.probs()
        for name, row in zip(self.kc_names, probs):
            lines.append(name + "," + ",".join(f"{p:.6f}" for p in row))
        return "\n".join(lines) + "\n"


def bkt_predict(pl, g, s):
    """P(correct) = pL(1-S) + (1-pL)G."""
    return pl * (1.0 - s) + (1.0 - pl) * g


def bkt_observe(pl, y, g, s):
    """Bayes posterior of mastery after observing y."""
    if y == 1:
        num = pl * (1.0 - s)
        den = num + (1.0 - pl) * g
    else:
        num = pl * s
        den = num + (1.0 - pl) * (1.0 - g)
    return num / max(den, _DEN_EPS)


def bkt_transition(pl, t, f):
    """Next-step prior with learning T and forgetting F."""
    return pl * (1.0 - f) + (1.0 - pl) * t


def bkt_forward(ys, probs):
    """Filtering predictions for one KC's observation sequence.

    `probs` is the (L0, T, G, S, F) tuple; returns P(correct) before each
    observation.
    """
    l0, t, g, s, f = probs
    pl = l0
    preds = []
    for y in ys:
        preds.append(bkt_predict(pl, g, s))
        pl = bkt_transition(bkt_observe(pl, y, g, s), t, f)
    return np.array(preds)


def expand_per_kc(records, kc_index):
    """One observation stream per (student, KC), temporal order preserved.

    Returns a list of (kc_idx, y array). KC ids missing from `kc_index`
    are skipped.
    """
    streams = {}
    for student, seq in sorted(student_order(records).items()):
        for rec in seq:
            for kc in sorted(rec.kc_ids):
                idx = kc_index.get(kc)
                if idx is None:
                    continue
                streams.setdefault((student, idx), []).append(rec.correct)
    return [(idx, np.array(ys, dtype=np.float64)) for (_, idx), ys in sorted(streams.items())]


def _bkt_batch_loss(params: BKTParams, kc_idx, y, mask) -> tuple[Node, np.ndarray]:
    """Masked BCE of the filtering recurrence over a padded stream batch."""
    probs = ad.sigmoid(ad.gather_rows(params.logits, kc_idx))  # [B, 5]
    l0 = ad.slice_cols(probs, 0, 1)
    t_ = ad.slice_cols(probs, 1, 2)
    g_ = ad.slice_cols(probs, 2, 3)
    s_ = ad.slice_cols(probs, 3, 4)
    f_ = ad.slice_cols(probs, 4, 5)
    one = ad.constant(np.ones_like(l0.value))
    not_s = ad.sub(one, s_)
    not_g = ad.sub(one, g_)
    not_f = ad.sub(one, f_)

    pl = l0  # [B, 1] mastery probability, column-shaped throughout
    b, t_max = y.shape
    preds = np.zeros((b, t_max))
    loss_num = None
    for step in range(t_max):
        yc = y[:, step : step + 1]
        pred = ad.add(ad.mul(pl, not_s), ad.mul(ad.sub(one, pl), g_))
        preds[:, step] = pred.value[:, 0]
        m = mask[:, step : step + 1]
        if m.sum() > 0:
            step_loss = ad.scale(ad.bce_loss(pred, yc, m), float(m.sum()))
            loss_num = step_loss if loss_num is None else ad.add(loss_num, step_loss)
        # posterior, branch selected by the observed label
        num1 = ad.mul(pl, not_s)
        den1 = ad.clamp_min(ad.add(num1, ad.mul(ad.sub(one, pl), g_)), _DEN_EPS)
        num0 = ad.mul(pl, s_)
        den0 = ad.clamp_min(ad.add(num0, ad.mul(ad.sub(one, pl), not_g)), _DEN_EPS)
        post1 = ad.divide(num1, den1)
        post0 = ad.divide(num0, den0)
        post = ad.add(ad.mul(post1, ad.constant(yc)), ad.mul(post0, ad.constant(1.0 - yc)))
        pl = ad.add(ad.mul(post, not_f), ad.mul(ad.sub(one, post), t_))
    total = mask.sum()
    if loss_num is None:
        raise ValueError("bkt batch: no valid steps")
    return ad.scale(loss_num, 1.0 / total), preds


def _pad_streams(streams, max_len):
    """Chunk streams to max_len and pad into (kc_idx [B], y [B,T], mask)."""
    chunks = []
    for idx, ys in streams:
        for lo in range(0, len(ys), max_len):
            part = ys[lo : lo + max_len]
            chunks.append((idx, part))
    return chunks


def _stream_batch(chunks):
    b = len(chunks)
    t_max = max(len(ys) for _, ys in chunks)
    kc_idx = np.array([idx for idx, _ in chunks], dtype=np.int64)
    y = np.zeros((b, t_max))
    mask = np.zeros((b, t_max))
    for i, (_, ys) in enumerate(chunks):
        y[i, : len(ys)] = ys
        mask[i, : len(ys)] = 1.0
    return kc_idx, y, mask


@dataclass
class BKTModel:
    params: BKTParams
    kc_index: dict

    def predict_records(self, records):
        """Question-level (scores, labels): mean of per-KC predictions.

        Steps with no KC known to the model are skipped.
        """
        probs = self.params.probs()
        scores, labels = [], []
        for student, seq in sorted(student_order(records).items()):
            state = {}
            for rec in seq:
                idxs = [self.kc_index[k] for k in sorted(rec.kc_ids) if k in self.kc_index]
                if not idxs:
                    continue
                preds = []
                for idx in idxs:
                    l0, t, g, s, f = probs[idx]
                    pl = state.get(idx, l0)
                    preds.append(bkt_predict(pl, g, s))
                    state[idx] = bkt_transition(bkt_observe(pl, rec.correct, g, s), t, f)
                scores.append(float(np.mean(preds)))
                labels.append(rec.correct)
        return np.array(scores), np.array(labels, dtype=np.float64)


def train_bkt(
    train_records,
    val_records,
    kc_names,
    seed: int = 0,
    lr: float = 0.01,
    batch_size: int = 128,
    max_len: int = DEFAULT_MAX_LEN,
    max_epochs: int = 200,
    patience: int = 10,
):
    """SGD on the BCE of the filtering predictions, early stop on val AUC."""
    from .evalkit import safe_auc

    params = BKTParams.init(kc_names)
    kc_index = {k: i for i, k in enumerate(params.kc_names)}
    model = BKTModel(params=params, kc_index=kc_index)
    chunks = _pad_streams(expand_per_kc(train_records, kc_index), max_len)
    if not chunks:
        raise ValueError("train_bkt: no observation streams")
    opt = ad.SGD([params.logits], lr=lr)
    rng = np.random.default_rng(seed)

    best_auc = -np.inf
    best = params.logits.value.copy()
    since_best = 0
    log = []
    for epoch in range(1, max_epochs + 1):
        order = rng.permutation(len(chunks))
        losses, weights = [], []
        for lo in range(0, len(chunks), batch_size):
            group = [chunks[i] for i in order[lo : lo + batch_size]]
            kc_idx, y, mask = _stream_batch(group)
            opt.zero_grad()
            loss, _ = _bkt_batch_loss(params, kc_idx, y, mask)
            if not np.isfinite(loss.value):
                raise TrainingDiverged(epoch)
            ad.backward(loss)
            opt.step()
            losses.append(float(loss.value))
            weights.append(mask.sum())
        train_loss = float(np.average(losses, weights=weights))

        scores, labels = model.predict_records(val_records)
        val_auc = safe_auc(scores, labels)
        log.append(TrainLogEntry(epoch=epoch, train_loss=train_loss, val_auc=val_auc))
        if val_auc > best_auc:
            best_auc = val_auc
            best = params.logits.value.copy()
            since_best = 0
        else:
            since_best += 1
            if since_best >= patience:
                break
    params.logits.value[...] = best
    return params, log


def save_bkt(model: BKTModel, path) -> None:
    from .checkpoint import save_checkpoint

    save_checkpoint(path, {"model": "bkt", "kc_names": model.params.kc_names},
                    {"logits": model.params.logits.value})


def load_bkt(path) -> BKTModel:
    from .checkpoint import CheckpointError, load_checkpoint

    cfg, arrays = load_checkpoint(path)
    if cfg.get("model") != "bkt":
        raise CheckpointError(f"{path}: not a BKT checkpoint (model={cfg.get('model')!r})")
    params = BKTParams(logits=ad.parameter(arrays["logits"], "bkt_logits"),
                       kc_names=list(cfg["kc_names"]))
    return BKTModel(params=params, kc_index={k: i for i, k in enumerate(params.kc_names)})


@dataclass(frozen=True)
class DKTConfig:
    num_kcs: int  # N' (original or N+M when augmented)
    embed_dim: int = 32
    hidden_dim: int = 128


@dataclass
class DKTParams:
    emb: Node  # [2N', d]; rows [0,N') are (k, y=1), rows [N',2N') are (k, y=0)
    lstm: ad.LSTMParams
    w_out: Node  # [N', H]
    b_out: Node  # [N']

    def named(self) -> dict:
        return {
            "emb": self.emb,
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
    def init(config: DKTConfig, rng: np.random.Generator) -> "DKTParams":
        n, d, hh = config.num_kcs, config.embed_dim, config.hidden_dim
        bound = 1.0 / np.sqrt(hh)
        return DKTParams(
            emb=ad.parameter(rng.normal(0.0, 0.1, size=(2 * n, d)), "emb"),
            lstm=ad.LSTMParams.init(d, hh, rng),
            w_out=ad.parameter(rng.uniform(-bound, bound, size=(n, hh)), "w_out"),
            b_out=ad.parameter(np.zeros(n), "b_out"),
        )


def dkt_forward_batch(batch, params: DKTParams, config: DKTConfig):
    """Returns (y_hat values [B, T], loss Node).

    Step input is the mean embedding of the question's (KC, label) rows;
    the prediction for step t is the mean of the per-KC probabilities under
    the state from steps < t, so it never sees y_t.
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
        counts = np.maximum(u_kc.sum(axis=1), 1.0)

        o_prev = ad.affine(params.w_out, h, params.b_out)
        probs = ad.sigmoid(o_prev)
        yhat = ad.mul(ad.rowsum(ad.mul(probs, ad.constant(u_kc))), ad.constant(1.0 / counts))
        yhat_vals[:, t] = yhat.value

        m = batch.loss_mask[:, t]
        if m.sum() > 0:
            step_loss = ad.scale(ad.bce_loss(yhat, y, m), float(m.sum()))
            loss_num = step_loss if loss_num is None else ad.add(loss_num, step_loss)

        ycol = y[:, None]
        u_kc_y = np.concatenate([u_kc * ycol, u_kc * (1.0 - ycol)], axis=-1)
        x = ad.matmul(ad.constant(u_kc_y / counts[:, None]), params.emb)
        h, c = ad.lstm_cell(x, h, c, params.lstm)
    total = batch.loss_mask.sum()
    if loss_num is None:
        raise ValueError("dkt_forward_batch: no valid steps in batch")
    return yhat_vals, ad.scale(loss_num, 1.0 / total)


@dataclass
class DKTModel:
    config: DKTConfig
    params: DKTParams

    def predict_batches(self, batches):
        scores, labels = [], []
        with ad.no_grad():
            for batch in batches:
                yhat, _ = dkt_forward_batch(batch, self.params, self.config)
                keep = batch.loss_mask > 0
                scores.append(yhat[keep])
                labels.append(batch.y[keep])
        return np.concatenate(scores), np.concatenate(labels)


def save_dkt(model: DKTModel, path, vocab=None) -> None:
    from .checkpoint import save_checkpoint

    cfg = {"model": "dkt", "num_kcs": model.config.num_kcs,
           "embed_dim": model.config.embed_dim, "hidden_dim": model.config.hidden_dim}
    if vocab is not None:
        cfg["vocab"] = {"questions": vocab.questions, "kcs": vocab.kcs}
    save_checkpoint(path, cfg, model.params.snapshot())


def load_dkt(path):
    """Returns (DKTModel, vocab-or-None)."""
    from .checkpoint import CheckpointError, load_checkpoint
    from .data import Vocab

    cfg, arrays = load_checkpoint(path)
    if cfg.get("model") != "dkt":
        raise CheckpointError(f"{path}: not a DKT checkpoint (model={cfg.get('model')!r})")
    config = DKTConfig(num_kcs=cfg["num_kcs"], embed_dim=cfg["embed_dim"],
                       hidden_dim=cfg["hidden_dim"])
    params = DKTParams.init(config, np.random.default_rng(0))
    params.restore(arrays)
    vocab = None
    if "vocab" in cfg:
        vocab = Vocab(questions=cfg["vocab"]["questions"], kcs=cfg["vocab"]["kcs"])
    return DKTModel(config=config, params=params), vocab


def train_dkt(
    train_batches,
    val_batches,
    config: DKTConfig,
    seed: int = 0,
    lr: float = 1e-3,
    max_epochs: int = 200,
    patience: int = 10,
    clip_norm: float = 5.0,
):
    """Adam training mirroring the SBRKT early-stopping policy."""
    from .evalkit import safe_auc

    rng = np.random.default_rng(seed)
    params = DKTParams.init(config, rng)
    opt = ad.Adam(params.named(), lr=lr)
    model = DKTModel(config=config, params=params)

    best_auc = -np.inf
    best_snap = params.snapshot()
    since_best = 0
    log = []
    for epoch in range(1, max_epochs + 1):
        losses, weights = [], []
        order = rng.permutation(len(train_batches))
        for i in order:
            batch = train_batches[i]
            opt.zero_grad()
            _, loss = dkt_forward_batch(batch, params, config)
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
