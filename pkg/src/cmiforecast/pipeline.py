"""Featurisation, training, evaluation and the ablation harness.

Randomness comes from independent PCG64 streams keyed by
``(seed, purpose, epoch, batch)`` through ``numpy.random.SeedSequence``
spawn keys, so any batch's shuffle or pair draw can be regenerated without
replaying the ones before it.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__
from .autograd import Adam, Tensor, backward, binary_cross_entropy_with_logits, dense
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import MODES, RunConfig
from .contrastive import batch_loss, sample_pairs
from .downstream import EvalReport, evaluate, generalization_gap, predict, train_logistic
from .encoder import CONTEXT_MODES, EncoderConfig, context_vectors, encode_dataset, init_params
from .errors import (ConfigError, DataError, IncompatibleCheckpoint, InsufficientBatch, InsufficientHistory,
                     TrainingDiverged)
from .features import (N_FEATURES, Dataset, NormStats, OhlcvFrame, frame_samples, load_ohlcv,
                       normalize, split_by_date)

log = logging.getLogger(__name__)

INIT, SHUFFLE, PAIRS, HEAD = 0, 1, 2, 3


def rng_stream(seed: int, purpose: int, epoch: int = 0, batch: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(purpose, epoch, batch))))


# -- featurisation -----------------------------------------------------------------

@dataclass
class FeaturizedData:
    train: Dataset
    test: Dataset
    stats: NormStats
    tickers: list[str]
    report: dict = field(default_factory=dict)

    @property
    def n_stocks(self) -> int:
        return len(self.tickers)

    @property
    def window(self) -> int:
        return self.train.x.shape[1]


def featurize(frames: Sequence[OhlcvFrame], cfg: RunConfig) -> FeaturizedData:
    """Windows for every stock, split by date and z-scored with train stats.

    Stocks are processed in the given order; the index is the stock id.
    """
    report: dict = {"stocks": len(frames), "per_stock": {}}
    samples = []
    for sid, frame in enumerate(frames):
        per: dict = {}
        try:
            got = frame_samples(frame, sid, cfg.window, cfg.up_thresh, cfg.down_thresh,
                                cfg.sma_windows, report=per)
        except InsufficientHistory as exc:
            per["error"] = str(exc)
            got = []
        per["rows"] = len(frame)
        per["windows"] = len(got)
        report["per_stock"][frame.ticker] = per
        samples.extend(got)
    full = Dataset.from_samples(samples, cfg.window)
    train, test = split_by_date(full, cfg.train_range, cfg.test_range)
    report["windows"] = len(full)
    report["train"] = len(train)
    report["test"] = len(test)
    report["discarded_outside_ranges"] = len(full) - len(train) - len(test)
    if len(train) == 0:
        raise DataError("no training windows fall inside the training date range")
    train, test, stats = normalize(train, test)
    report["constant_features"] = [int(i) for i in np.nonzero(stats.constant)[0]]
    return FeaturizedData(train, test, stats, [f.ticker for f in frames], report)


def load_frames(data_dir) -> list[OhlcvFrame]:
    paths = sorted(Path(data_dir).glob("*.csv"))
    if not paths:
        raise DataError(f"no <TICKER>.csv files in {data_dir}")
    return [load_ohlcv(p) for p in paths]


def _days(dates: np.ndarray) -> np.ndarray:
    return dates.astype("datetime64[D]").astype(np.int64).astype(np.float32)


def dataset_checkpoint(data: FeaturizedData, cfg: RunConfig | None = None) -> Checkpoint:
    tensors = {}
    for split, ds in (("train", data.train), ("test", data.test)):
        tensors[f"{split}.x"] = ds.x
        tensors[f"{split}.y"] = ds.y.astype(np.float32)
        tensors[f"{split}.stock_id"] = ds.stock_ids.astype(np.float32)
        tensors[f"{split}.day"] = _days(ds.dates)
    tensors["norm.mean"] = data.stats.mean.astype(np.float32)
    tensors["norm.std"] = data.stats.std.astype(np.float32)
    tensors["norm.constant"] = data.stats.constant.astype(np.float32)
    meta = {"kind": "dataset", "tickers": list(data.tickers), "report": data.report,
            "window": int(data.window), "n_features": N_FEATURES}
    if cfg is not None:
        meta["config"] = cfg.to_dict()
    return Checkpoint(meta, tensors)


def save_dataset(data: FeaturizedData, path, cfg: RunConfig | None = None) -> Path:
    return save_checkpoint(dataset_checkpoint(data, cfg), path)


def load_dataset(path) -> FeaturizedData:
    ckpt = load_checkpoint(path)
    if ckpt.meta.get("kind") != "dataset":
        raise DataError(f"{path} is not a featurised dataset")
    t = ckpt.tensors

    def split(name):
        return Dataset(t[f"{name}.x"], t[f"{name}.y"].astype(np.int64), t[f"{name}.stock_id"].astype(np.int64),
                       t[f"{name}.day"].astype(np.int64).astype("datetime64[D]"))
    stats = NormStats(t["norm.mean"].astype(np.float64), t["norm.std"].astype(np.float64),
                      t["norm.constant"].astype(bool))
    return FeaturizedData(split("train"), split("test"), stats, list(ckpt.meta["tickers"]),
                          ckpt.meta.get("report", {}))


# -- training ----------------------------------------------------------------------

@dataclass
class TrainResult:
    params: dict[str, Tensor]
    encoder: EncoderConfig
    config: RunConfig
    losses: list[tuple[int, int, float]] = field(default_factory=list)
    step: int = 0
    epochs_done: int = 0
    status: str = "ok"
    seconds: float = 0.0

    def epoch_losses(self) -> list[float]:
        out: dict[int, list[float]] = {}
        for epoch, _, loss in self.losses:
            out.setdefault(epoch, []).append(loss)
        return [float(np.mean(v)) for _, v in sorted(out.items())]

    def to_checkpoint(self, tickers: Sequence[str] = ()) -> Checkpoint:
        meta = {
            "kind": "checkpoint",
            "version": __version__,
            "config": self.config.to_dict(),
            "encoder": self.encoder.to_dict(),
            "tickers": list(tickers),
            "step": self.step,
            "status": self.status,
            "rng": {"generator": "PCG64/SeedSequence", "seed": self.config.seed, "epoch": self.epochs_done},
        }
        return Checkpoint(meta, {k: v.data for k, v in self.params.items()})


def epoch_batches(n: int, batch: int, perm: np.ndarray) -> list[np.ndarray]:
    """Split a permutation into batches; a remainder below 3 joins the last batch."""
    if n < 3:
        raise InsufficientBatch(f"need at least 3 training samples, got {n}")
    starts = list(range(0, n, batch))
    chunks = [perm[s:s + batch] for s in starts]
    if len(chunks) > 1 and len(chunks[-1]) < 3:
        tail = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], tail])
    return chunks


def _head_logits(params: dict[str, Tensor], codes: Tensor) -> Tensor:
    return dense(codes, params["head.w"], params["head.b"]).reshape(codes.shape[:-1])


def run_train(cfg: RunConfig, data: FeaturizedData, checkpoint_path=None, quiet: bool = False) -> TrainResult:
    """Train the encoder (``mode="cmi"``) or encoder plus head (``mode="direct"``).

    On a non-finite loss the last good parameters are written with status
    ``diverged`` and ``TrainingDiverged`` is raised.
    """
    cfg.validate()
    enc = cfg.encoder_config(data.n_stocks).validate()
    if data.window != enc.window:
        raise IncompatibleCheckpoint(f"dataset windows have {data.window} steps, config expects {enc.window}")
    train = data.train
    direct = cfg.mode == "direct"
    params = init_params(enc, rng_stream(cfg.seed, INIT), head=direct)
    opt = Adam(list(params.values()), lr=cfg.lr)
    result = TrainResult(params, enc, cfg)
    good = {k: v.data.copy() for k, v in params.items()}
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        perm = rng_stream(cfg.seed, SHUFFLE, epoch).permutation(len(train))
        for b, idx in enumerate(epoch_batches(len(train), cfg.batch, perm)):
            try:
                codes = context_vectors(params, train.x[idx], train.stock_ids[idx], enc)
                if direct:
                    loss = binary_cross_entropy_with_logits(_head_logits(params, codes), train.y[idx])
                else:
                    pairs = sample_pairs(train.y[idx], rng_stream(cfg.seed, PAIRS, epoch, b))
                    loss = batch_loss(codes, pairs)
                if not np.isfinite(loss.item()):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch} batch {b}")
                opt.zero_grad()
                backward(loss)
                opt.step()
            except TrainingDiverged:
                result.status = "diverged"
                for k, v in params.items():
                    v.data = good[k]
                if checkpoint_path is not None:
                    save_checkpoint(result.to_checkpoint(data.tickers), checkpoint_path)
                raise
            result.step += 1
            result.losses.append((epoch, b, loss.item()))
        result.epochs_done = epoch + 1
        good = {k: v.data.copy() for k, v in params.items()}
        if not quiet:
            log.info("epoch %d/%d loss %.5f", epoch + 1, cfg.epochs, result.epoch_losses()[-1])
    result.seconds = time.perf_counter() - t0
    if checkpoint_path is not None:
        save_checkpoint(result.to_checkpoint(data.tickers), checkpoint_path)
    return result


def direct_head_train(cfg: RunConfig, data: FeaturizedData, epochs: int | None = None, **kwargs) -> TrainResult:
    """End-to-end baseline: the same encoder plus a linear-sigmoid head on the labels."""
    return run_train(cfg.replace(mode="direct", epochs=epochs), data, **kwargs)


def params_from_checkpoint(ckpt: Checkpoint) -> tuple[dict[str, Tensor], EncoderConfig, RunConfig]:
    if ckpt.meta.get("kind") != "checkpoint":
        raise IncompatibleCheckpoint("file is not a model checkpoint")
    enc = EncoderConfig(**ckpt.meta["encoder"])
    cfg = RunConfig.from_dict(ckpt.meta["config"])
    return {k: Tensor(v) for k, v in ckpt.tensors.items()}, enc, cfg


# -- evaluation ----------------------------------------------------------------------

def _standardize(train_codes: np.ndarray, *others: np.ndarray) -> list[np.ndarray]:
    mu = train_codes.mean(axis=0, dtype=np.float64)
    sd = train_codes.std(axis=0, dtype=np.float64)
    sd = np.where(sd > 1e-12, sd, 1.0)
    return [(c - mu) / sd for c in (train_codes,) + others]


def run_evaluate(source, data: FeaturizedData, cfg: RunConfig | None = None, name: str = "") -> EvalReport:
    """Test-set report with train accuracy and generalisation gap.

    ``source`` is a ``TrainResult``, a ``Checkpoint`` or a checkpoint path.
    For ``cmi`` checkpoints a logistic head is fitted on standardised train
    contexts; ``direct`` checkpoints use their own trained head.
    """
    if isinstance(source, TrainResult):
        params, enc, ckpt_cfg = source.params, source.encoder, source.config
    else:
        ckpt = source if isinstance(source, Checkpoint) else load_checkpoint(source)
        params, enc, ckpt_cfg = params_from_checkpoint(ckpt)
    cfg = cfg or ckpt_cfg
    if data.window != enc.window:
        raise IncompatibleCheckpoint(f"checkpoint expects {enc.window}-step windows, data has {data.window}")
    if enc.use_identity and enc.n_stocks != data.n_stocks:
        raise IncompatibleCheckpoint(f"checkpoint conditions on {enc.n_stocks} stocks, data has {data.n_stocks}")
    if data.train.x.shape[-1] != enc.n_features:
        raise IncompatibleCheckpoint("feature count mismatch between checkpoint and data")
    tr_codes = encode_dataset(params, data.train.x, data.train.stock_ids, enc)
    te_codes = encode_dataset(params, data.test.x, data.test.stock_ids, enc)
    if "head.w" in params:
        w, b = params["head.w"].data[:, 0].astype(np.float64), float(params["head.b"].data[0])
        tr_pred = (tr_codes @ w + b >= 0).astype(np.int64)
        te_pred = (te_codes @ w + b >= 0).astype(np.int64)
    else:
        tr_s, te_s = _standardize(tr_codes, te_codes)
        head = train_logistic(tr_s, data.train.y, epochs=cfg.head_epochs, l2=cfg.head_l2,
                              seed=int(rng_stream(ckpt_cfg.seed, HEAD).integers(2**31)))
        tr_pred, te_pred = predict(head, tr_s), predict(head, te_s)
    train_report = evaluate(tr_pred, data.train.y)
    if len(data.test) == 0:
        report = EvalReport.undefined(name)
    else:
        report = evaluate(te_pred, data.test.y, name=name)
    report.train_accuracy = train_report.accuracy
    report.generalization_gap = generalization_gap(train_report, report)
    return report


# -- ablations -----------------------------------------------------------------------

@dataclass
class Variant:
    context_mode: str = "attention"
    use_identity: bool = True
    mode: str = "cmi"

    @property
    def label(self) -> str:
        ident = "id" if self.use_identity else "no-id"
        return f"{self.mode}/{self.context_mode}/{ident}"


def parse_variant(text: str) -> Variant:
    """``mode/context_mode/id|no-id``; trailing fields may be omitted."""
    parts = [p.strip() for p in text.split("/") if p.strip()]
    if len(parts) > 3:
        raise ConfigError(f"variant {text!r} has more than three fields")
    v = Variant()
    if parts:
        v.mode = parts[0]
    if len(parts) > 1:
        v.context_mode = parts[1]
    if len(parts) > 2:
        if parts[2] not in ("id", "no-id"):
            raise ConfigError(f"identity field of {text!r} must be 'id' or 'no-id'")
        v.use_identity = parts[2] == "id"
    if v.mode not in MODES or v.context_mode not in CONTEXT_MODES:
        raise ConfigError(f"bad variant {text!r}; expected MODE/CONTEXT/ID with mode in {MODES} "
                          f"and context in {CONTEXT_MODES}")
    return v


def default_variants() -> list[Variant]:
    rows = [Variant(context_mode=m) for m in ("max", "avg", "concat_dense", "last", "attention")]
    rows.append(Variant(use_identity=False))
    rows.append(Variant(mode="direct"))
    return rows


def run_ablation(cfg: RunConfig, data: FeaturizedData, variants: Iterable[Variant] | None = None,
                 seeds: Sequence[int] | None = None) -> list[dict]:
    """Train and evaluate every variant for every seed; one row per pair.

    Variants differ from ``cfg`` only in the fields they name.
    """
    variants = list(variants) if variants is not None else default_variants()
    seeds = list(seeds) if seeds is not None else [cfg.seed]
    rows = []
    for v in variants:
        for seed in seeds:
            vcfg = cfg.replace(context_mode=v.context_mode, use_identity=v.use_identity, mode=v.mode, seed=seed)
            result = run_train(vcfg, data, quiet=True)
            report = run_evaluate(result, data, name=v.label)
            rows.append({
                "variant": v.label, "mode": v.mode, "context_mode": v.context_mode,
                "use_identity": v.use_identity, "seed": seed,
                "accuracy": report.accuracy, "mcc": report.mcc,
                "train_accuracy": report.train_accuracy, "gap": report.generalization_gap,
                "final_loss": result.epoch_losses()[-1] if result.losses else None,
            })
            log.info("%s seed=%d acc=%s mcc=%s", v.label, seed, report.accuracy, report.mcc)
    return rows
