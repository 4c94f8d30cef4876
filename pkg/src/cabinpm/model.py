"""The encoder-decoder forecaster and its training / checkpoint machinery.

Architecture: bidirectional GRU encoder (or plain GRU for the baseline)
-> repeat vector over the horizon -> unidirectional GRU decoder started
from a zero state -> optional ReLU hidden head -> identity output head.
The decoder stays unidirectional even in the bidirectional model so it
can run causally at prediction time.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
import time
import zlib
from dataclasses import dataclass, asdict

import numpy as np

from . import nn, tensorio
from .errors import (
    BadMagicError,
    ChecksumError,
    DataError,
    TruncatedError,
    VersionError,
)
from .preprocess import NormalizationParams, WindowedDataset

CHECKPOINT_MAGIC = b"AEDM"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int
    target_dim: int
    enc_hidden: int = 8
    dec_hidden: int = 16
    head_hidden: int = 16      # 0 = no hidden head layer
    horizon: int = 60
    lookback: int = 300
    bidirectional: bool = True
    seed: int = 0

    def validate(self) -> None:
        dims = (self.feature_dim, self.target_dim, self.enc_hidden, self.dec_hidden,
                self.horizon, self.lookback)
        if min(dims) < 1 or self.head_hidden < 0:
            raise DataError(f"invalid model dimensions: {self}")

    @property
    def decoder_input_dim(self) -> int:
        return 2 * self.enc_hidden if self.bidirectional else self.enc_hidden


@dataclass
class Seq2SeqParams:
    enc_f: nn.GruCellParams
    enc_b: nn.GruCellParams | None
    dec: nn.GruCellParams
    head_h: nn.AffineParams | None
    head_o: nn.AffineParams

    def to_flat(self) -> dict[str, np.ndarray]:
        flat: dict[str, np.ndarray] = {}
        for name, cell in (("enc_f", self.enc_f), ("enc_b", self.enc_b), ("dec", self.dec)):
            if cell is None:
                continue
            for k, arr in cell.as_dict().items():
                flat[f"{name}.{k}"] = arr
        if self.head_h is not None:
            for k, arr in self.head_h.as_dict().items():
                flat[f"head_h.{k}"] = arr
        for k, arr in self.head_o.as_dict().items():
            flat[f"head_o.{k}"] = arr
        return flat

    @classmethod
    def from_flat(cls, cfg: ModelConfig, flat: dict[str, np.ndarray]) -> "Seq2SeqParams":
        def cell(prefix: str) -> nn.GruCellParams:
            return nn.GruCellParams(**{k: flat[f"{prefix}.{k}"] for k in nn.GruCellParams.KEYS})

        head_h = None
        if "head_h.w" in flat:
            head_h = nn.AffineParams(w=flat["head_h.w"], b=flat["head_h.b"], activation="relu")
        return cls(
            enc_f=cell("enc_f"),
            enc_b=cell("enc_b") if cfg.bidirectional else None,
            dec=cell("dec"),
            head_h=head_h,
            head_o=nn.AffineParams(w=flat["head_o.w"], b=flat["head_o.b"], activation="identity"),
        )

    def param_count(self) -> int:
        return sum(a.size for a in self.to_flat().values())


def init_model(cfg: ModelConfig) -> Seq2SeqParams:
    """Seeded initialization; the same config yields bit-identical params."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    enc_f = nn.init_gru_cell(rng, cfg.feature_dim, cfg.enc_hidden)
    enc_b = nn.init_gru_cell(rng, cfg.feature_dim, cfg.enc_hidden) if cfg.bidirectional else None
    dec = nn.init_gru_cell(rng, cfg.decoder_input_dim, cfg.dec_hidden)
    head_h = None
    head_in = cfg.dec_hidden
    if cfg.head_hidden > 0:
        head_h = nn.init_affine(rng, cfg.dec_hidden, cfg.head_hidden, activation="relu")
        head_in = cfg.head_hidden
    head_o = nn.init_affine(rng, head_in, cfg.target_dim, activation="identity")
    return Seq2SeqParams(enc_f=enc_f, enc_b=enc_b, dec=dec, head_h=head_h, head_o=head_o)


def forward_batch(
    params: Seq2SeqParams, cfg: ModelConfig, xs: np.ndarray
) -> tuple[np.ndarray, dict]:
    """xs (B, lookback, feature_dim) -> predictions (B, horizon, target_dim)."""
    if xs.ndim != 3 or xs.shape[1] != cfg.lookback or xs.shape[2] != cfg.feature_dim:
        raise DataError(
            f"expected inputs (B, {cfg.lookback}, {cfg.feature_dim}), got {xs.shape}"
        )
    cache: dict = {}
    if cfg.bidirectional:
        state, cache["enc"] = nn.bidirectional_encode(params.enc_f, params.enc_b, xs)
    else:
        _, state, cache["enc"] = nn.gru_sequence_forward(params.enc_f, xs)
    rep = nn.repeat_vector(state, cfg.horizon)
    dec_hs, _, cache["dec"] = nn.gru_sequence_forward(params.dec, rep)
    h = dec_hs
    if params.head_h is not None:
        h, cache["head_h"] = nn.time_distributed_affine(params.head_h, h)
    out, cache["head_o"] = nn.time_distributed_affine(params.head_o, h)
    return out, cache


def backward_batch(
    params: Seq2SeqParams, cfg: ModelConfig, cache: dict, dout: np.ndarray
) -> dict[str, np.ndarray]:
    """Gradient of the scalar loss w.r.t. every parameter (flat dict)."""
    grads: dict[str, np.ndarray] = {}
    go, dh = nn.time_distributed_affine_backward(params.head_o, cache["head_o"], dout)
    for k, g in go.items():
        grads[f"head_o.{k}"] = g
    if params.head_h is not None:
        gh, dh = nn.time_distributed_affine_backward(params.head_h, cache["head_h"], dh)
        for k, g in gh.items():
            grads[f"head_h.{k}"] = g
    gdec, drep, _ = nn.gru_sequence_backward(params.dec, cache["dec"], dhs=dh)
    for k, g in gdec.items():
        grads[f"dec.{k}"] = g
    dstate = nn.repeat_vector_backward(drep)
    if cfg.bidirectional:
        gf, gb, _ = nn.bidirectional_encode_backward(
            params.enc_f, params.enc_b, cache["enc"], dstate
        )
        for k, g in gf.items():
            grads[f"enc_f.{k}"] = g
        for k, g in gb.items():
            grads[f"enc_b.{k}"] = g
    else:
        gf, _, _ = nn.gru_sequence_backward(params.enc_f, cache["enc"], dh_final=dstate)
        for k, g in gf.items():
            grads[f"enc_f.{k}"] = g
    return grads


# ---------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    alpha: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 100        # epochs without val improvement before stopping
    clip_norm: float = 5.0     # 0 = off
    shuffle_seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.patience < 0:
            raise DataError(f"invalid training config: {self}")


@dataclass
class TrainReport:
    train_losses: list[float]
    val_losses: list[float]
    best_epoch: int            # 0-based index into the loss sequences
    wall_time_s: float

    @property
    def epochs_run(self) -> int:
        return len(self.train_losses)


def _eval_loss(
    params: Seq2SeqParams, cfg: ModelConfig, x: np.ndarray, y: np.ndarray, batch: int
) -> float:
    """Mean over windows of per-window MSE."""
    total = 0.0
    for lo in range(0, x.shape[0], batch):
        xb, yb = x[lo : lo + batch], y[lo : lo + batch]
        pred, _ = forward_batch(params, cfg, xb)
        loss, _ = nn.mse_loss(pred, yb)
        total += loss * xb.shape[0]
    return total / x.shape[0]


def train(
    params: Seq2SeqParams,
    cfg: ModelConfig,
    dataset: WindowedDataset,
    tcfg: TrainConfig,
) -> tuple[Seq2SeqParams, TrainReport]:
    """Mini-batch Adam on MSE with seeded shuffling and best-val selection."""
    tcfg.validate()
    xtr, ytr = dataset.x["train"], dataset.y["train"]
    xva, yva = dataset.x["val"], dataset.y["val"]
    if xtr.shape[0] == 0 or xva.shape[0] == 0:
        raise DataError("train and val splits must be non-empty")
    if xtr.shape[1] != cfg.lookback or xtr.shape[2] != cfg.feature_dim:
        raise DataError(
            f"dataset windows {xtr.shape[1:]} do not match model "
            f"(lookback {cfg.lookback}, features {cfg.feature_dim})"
        )

    start = time.monotonic()
    rng = np.random.default_rng(tcfg.shuffle_seed)
    flat = dict(params.to_flat())
    state = nn.AdamState.for_params(
        flat, alpha=tcfg.alpha, beta1=tcfg.beta1, beta2=tcfg.beta2, eps=tcfg.eps
    )

    train_losses: list[float] = []
    val_losses: list[float] = []
    best_val = np.inf
    best_flat = {k: a.copy() for k, a in flat.items()}
    best_epoch = 0
    stale = 0

    for epoch in range(tcfg.epochs):
        perm = rng.permutation(xtr.shape[0])
        epoch_loss = 0.0
        for lo in range(0, len(perm), tcfg.batch_size):
            idx = perm[lo : lo + tcfg.batch_size]
            xb, yb = xtr[idx], ytr[idx]
            p = Seq2SeqParams.from_flat(cfg, flat)
            pred, cache = forward_batch(p, cfg, xb)
            loss, dpred = nn.mse_loss(pred, yb)
            epoch_loss += loss * xb.shape[0]
            grads = backward_batch(p, cfg, cache, dpred)
            grads = nn.clip_grad_norm(grads, tcfg.clip_norm)
            flat, state = nn.adam_step(flat, grads, state)
        train_losses.append(epoch_loss / xtr.shape[0])

        val_loss = _eval_loss(
            Seq2SeqParams.from_flat(cfg, flat), cfg, xva, yva, tcfg.batch_size
        )
        val_losses.append(val_loss)

        if val_loss < best_val:
            best_val = val_loss
            best_flat = {k: a.copy() for k, a in flat.items()}
            best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale > tcfg.patience:
                break

    report = TrainReport(
        train_losses=train_losses,
        val_losses=val_losses,
        best_epoch=best_epoch,
        wall_time_s=time.monotonic() - start,
    )
    return Seq2SeqParams.from_flat(cfg, best_flat), report


# ---------------------------------------------------------------------------
# The deployable model: params + config + normalization, with checkpoints


class ForecastModel:
    """Everything needed to turn a raw lookback window into a raw forecast."""

    def __init__(
        self,
        params: Seq2SeqParams,
        cfg: ModelConfig,
        norm: NormalizationParams,
        feature_channels: tuple[str, ...],
        target_channels: tuple[str, ...],
        model_id: str | None = None,
    ):
        if cfg.feature_dim != len(feature_channels) or cfg.target_dim != len(target_channels):
            raise DataError("channel lists do not match model dimensions")
        self.params = params
        self.cfg = cfg
        self.norm = norm
        self.feature_channels = tuple(feature_channels)
        self.target_channels = tuple(target_channels)
        self.model_id = model_id or self._content_id()

    def _content_id(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params.to_flat()):
            h.update(k.encode())
            h.update(self.params.to_flat()[k].tobytes())
        return h.hexdigest()[:12]

    def forward_normalized(self, x: np.ndarray) -> np.ndarray:
        """One normalized window (lookback, features) -> (horizon, targets)."""
        out, _ = forward_batch(self.params, self.cfg, x[None])
        return out[0]

    def predict(self, raw_window: np.ndarray) -> np.ndarray:
        """Raw-unit window in, raw-unit forecast out.

        Count and mass channels are floored at 0 after denormalization.
        """
        if raw_window.shape != (self.cfg.lookback, self.cfg.feature_dim):
            raise DataError(
                f"expected window ({self.cfg.lookback}, {self.cfg.feature_dim}), "
                f"got {raw_window.shape}"
            )
        x = self.norm.normalize(raw_window, self.feature_channels)
        out = self.forward_normalized(x)
        raw = self.norm.denormalize(out, self.target_channels)
        for j, ch in enumerate(self.target_channels):
            if ch.startswith(("pc", "pm")):
                raw[:, j] = np.maximum(raw[:, j], 0.0)
        return raw

    # -- checkpoint format -------------------------------------------------
    # magic "AEDM" | u16 version | u32 header_len | JSON header |
    # parameter tensors in header order | norm mins | norm maxs |
    # u32 CRC32 of everything before it.

    def save(self, path) -> str:
        flat = self.params.to_flat()
        keys = sorted(flat)
        header = {
            "model_config": asdict(self.cfg),
            "feature_channels": list(self.feature_channels),
            "target_channels": list(self.target_channels),
            "norm_channels": list(self.norm.channels),
            "tensor_keys": keys,
        }
        hjson = json.dumps(header, sort_keys=True).encode("utf-8")
        buf = io.BytesIO()
        buf.write(CHECKPOINT_MAGIC)
        buf.write(struct.pack("<H", CHECKPOINT_VERSION))
        buf.write(struct.pack("<I", len(hjson)))
        buf.write(hjson)
        for k in keys:
            tensorio.write_tensor(buf, flat[k])
        tensorio.write_tensor(buf, self.norm.mins)
        tensorio.write_tensor(buf, self.norm.maxs)
        body = buf.getvalue()
        crc = zlib.crc32(body) & 0xFFFFFFFF
        blob = body + struct.pack("<I", crc)
        with open(path, "wb") as fh:
            fh.write(blob)
        self.model_id = hashlib.sha256(blob).hexdigest()[:12]
        return self.model_id

    @classmethod
    def load(cls, path) -> "ForecastModel":
        with open(path, "rb") as fh:
            blob = fh.read()
        if len(blob) < 4 or blob[:4] != CHECKPOINT_MAGIC:
            raise BadMagicError(f"{path}: not a checkpoint (bad magic)")
        if len(blob) < 10:
            raise TruncatedError(f"{path}: file too short")
        (version,) = struct.unpack("<H", blob[4:6])
        if version != CHECKPOINT_VERSION:
            raise VersionError(f"{path}: unsupported checkpoint version {version}")

        # Parse before verifying the checksum so a short file reports
        # truncation rather than a checksum mismatch.
        buf = io.BytesIO(blob[6:-4])
        raw = buf.read(4)
        if len(raw) != 4:
            raise TruncatedError(f"{path}: truncated header length")
        (hlen,) = struct.unpack("<I", raw)
        hjson = buf.read(hlen)
        if len(hjson) != hlen:
            raise TruncatedError(f"{path}: truncated header")
        header = json.loads(hjson.decode("utf-8"))
        cfg = ModelConfig(**header["model_config"])
        flat = {}
        for k in header["tensor_keys"]:
            flat[k] = tensorio.read_tensor(buf)
        mins = tensorio.read_tensor(buf)
        maxs = tensorio.read_tensor(buf)

        body, tail = blob[:-4], blob[-4:]
        (stored_crc,) = struct.unpack("<I", tail)
        if zlib.crc32(body) & 0xFFFFFFFF != stored_crc:
            raise ChecksumError(f"{path}: checksum mismatch")
        norm = NormalizationParams(
            channels=tuple(header["norm_channels"]), mins=mins, maxs=maxs
        )
        params = Seq2SeqParams.from_flat(cfg, flat)
        model_id = hashlib.sha256(blob).hexdigest()[:12]
        return cls(
            params=params,
            cfg=cfg,
            norm=norm,
            feature_channels=tuple(header["feature_channels"]),
            target_channels=tuple(header["target_channels"]),
            model_id=model_id,
        )
