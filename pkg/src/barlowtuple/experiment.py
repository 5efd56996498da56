"""Two-stage pipeline: Barlow Tuple pretraining, segmentation fine-tuning, evaluation.

Every random choice is drawn from a generator seeded by ``(run seed, purpose,
epoch)``, so a run is a pure function of its config and seed. The stage-2
patch plan never depends on the mode, which keeps the sequence of training
patches identical across the four modes for a given seed.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from . import models as M
from .errors import ConfigError, ContractError, DataError
from .metrics import (ConfusionMatrix, MetricRow, accumulate_confusion, format_metric_csv,
                      mean_pairwise_cosine_distance, miou)
from .ssl_loss import TupleLossConfig, barlow_tuple_loss
from .synth import (DataConfig, PatchOrigin, SlideSet, ZScoreStats, build_dataset, crop, load_dataset,
                    normalize, plan_hash, plan_patches, zscore_stats)
from .tiling import predict_tiled

log = logging.getLogger(__name__)

MODES = ("baseline_single", "baseline_multi", "pretrained_single", "pretrained_multi")

# generator streams
_INIT_ENCODER, _INIT_PROJECTOR, _INIT_DECODER, _DOMAIN_DRAW = 1, 2, 3, 4
_PRETRAIN_EPOCHS, _FINETUNE_EPOCHS, _VALIDATION = 1_000_000, 2_000_000, 3_000_000


@dataclass
class StageConfig:
    epochs: int
    batch_size: int
    max_lr: float
    base_lr: float | None = None
    lam: float = 5e-3


@dataclass
class ExperimentConfig:
    manifest: str | None = None
    data: DataConfig = field(default_factory=DataConfig)
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    encoder: M.EncoderConfig = field(default_factory=M.EncoderConfig)
    patch: int = 256
    per_slide: int = 50
    bg_frac: float = 0.10
    val_per_slide: int = 50
    overlap: int = 128
    pretrain: StageConfig = field(default_factory=lambda: StageConfig(200, 64, 1e-6))
    finetune: StageConfig = field(default_factory=lambda: StageConfig(100, 8, 1e-4))

    def __post_init__(self):
        if isinstance(self.data, dict):
            self.data = DataConfig(**self.data)
        if isinstance(self.encoder, dict):
            self.encoder = M.EncoderConfig(**self.encoder)
        if isinstance(self.pretrain, dict):
            self.pretrain = StageConfig(**self.pretrain)
        if isinstance(self.finetune, dict):
            self.finetune = StageConfig(**self.finetune)
        if self.patch % self.encoder.downsample:
            raise ConfigError(f"patch {self.patch} not divisible by {self.encoder.downsample}")
        if not 0 <= self.overlap < self.patch:
            raise ConfigError("overlap must be in [0, patch)")
        if len(self.data.train_domains) < 2:
            raise ConfigError("pretraining needs at least two training domains")

    @classmethod
    def paper(cls, **overrides) -> ExperimentConfig:
        """Protocol values as published: 256 px patches, 50 per slide, 200/100 epochs."""
        return cls(**overrides)

    @classmethod
    def desk(cls, **overrides) -> ExperimentConfig:
        """Scaled-down protocol that runs on one CPU core in minutes."""
        base = dict(
            patch=64, per_slide=16, val_per_slide=16, overlap=32,
            pretrain=StageConfig(epochs=30, batch_size=64, max_lr=2e-3),
            finetune=StageConfig(epochs=15, batch_size=8, max_lr=2e-3),
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, raw: dict) -> ExperimentConfig:
        """Merge ``raw`` into its preset (``"preset"`` key, default paper), section by section."""
        raw = dict(raw)
        preset = raw.pop("preset", "paper")
        if preset not in ("paper", "desk"):
            raise ConfigError(f"unknown preset {preset!r}")
        merged = _deep_merge(getattr(cls, preset)().to_dict(), raw)
        try:
            return cls(**merged)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path: str | Path) -> ExperimentConfig:
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        """Digest of everything except the seed list, so seeds share a run dir."""
        d = self.to_dict()
        d.pop("seeds")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]


def _deep_merge(base: dict, update: dict) -> dict:
    out = dict(base)
    for k, v in update.items():
        out[k] = _deep_merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


@dataclass
class RunRecord:
    config_hash: str
    seed: int
    mode: str
    metrics: list[MetricRow]
    selected_epoch: int
    patch_order_hash: str
    test_miou: dict[str, float] = field(default_factory=dict)
    concordance: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        d = asdict(self)
        d.pop("metrics")
        return d

    @classmethod
    def from_json(cls, d: dict, metrics: Sequence[MetricRow] = ()) -> RunRecord:
        return cls(d["config_hash"], d["seed"], d["mode"], list(metrics), d["selected_epoch"],
                   d["patch_order_hash"], dict(d.get("test_miou", {})), dict(d.get("concordance", {})))


def _split_modes(mode: str) -> tuple[bool, bool]:
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; choose from {MODES}")
    return mode.startswith("pretrained"), mode.endswith("multi")


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng([int(k) for k in key])


def _batches(items: Sequence, size: int) -> Iterable[Sequence]:
    for i in range(0, len(items), size):
        chunk = items[i:i + size]
        if len(chunk) >= 2:
            yield chunk


def load_slides(config: ExperimentConfig) -> SlideSet:
    """The manifest's slides when one is configured, else a fresh in-memory build."""
    if config.manifest is None:
        return build_dataset(config.data)
    dataset, data_config = load_dataset(config.manifest)
    if data_config != config.data:
        log.warning("manifest data settings differ from the config; using the manifest")
    return dataset


class Pipeline:
    """Holds the slide set, normalization statistics and fixed validation plan."""

    def __init__(self, config: ExperimentConfig, dataset: SlideSet):
        self.config = config
        self.data = dataset
        split = dataset.split
        if len(split.train_domains) < 2:
            raise ConfigError("pretraining needs at least two training domains")
        ref = split.reference_domain
        self.stats: ZScoreStats = zscore_stats([dataset.image(i, ref) for i in split.train],
                                               [dataset.masks[i] for i in split.train])
        self.val_plan = plan_patches({i: dataset.masks[i] for i in split.val}, _VALIDATION,
                                     config.patch, config.val_per_slide, config.bg_frac, config.data.seed)
        self.domain_names = dataset.domain_names
        self.seg_config = M.SegmenterConfig(config.encoder)

    # -- data -------------------------------------------------------------

    def batch(self, plan: Sequence[PatchOrigin], domains: Sequence[int] | int) -> np.ndarray:
        """Normalized ``[B, 3, P, P]`` crops; ``domains`` may vary per patch."""
        if isinstance(domains, int):
            domains = [domains] * len(plan)
        P = self.config.patch
        return normalize(np.stack([crop(self.data.image(o.slide_id, d), o, P) for o, d in zip(plan, domains)]),
                         self.stats)

    def train_plan(self, seed: int, epoch: int, stage: int) -> list[PatchOrigin]:
        c = self.config
        return plan_patches({i: self.data.masks[i] for i in self.data.split.train},
                            stage + 1000 * seed + epoch, c.patch, c.per_slide, c.bg_frac, c.data.seed)

    def masks(self, plan: Sequence[PatchOrigin]) -> np.ndarray:
        P = self.config.patch
        return np.stack([crop(self.data.masks[o.slide_id], o, P) for o in plan])

    def _assert_seen(self, domains: Iterable[int]) -> None:
        bad = set(domains) & set(self.data.split.heldout_domains)
        if bad:
            raise DataError(f"held-out domains {sorted(bad)} requested for training")

    # -- monitoring -------------------------------------------------------

    def bottleneck(self, params: M.Params, domain: int) -> np.ndarray:
        out = []
        with ad.no_grad():
            for chunk in _batches(self.val_plan, 64):
                out.append(M.encode(params, self.batch(chunk, domain), self.config.encoder).data)
        return np.concatenate(out)

    def alignment(self, params: M.Params) -> dict[str, float]:
        """Mean cosine distance from the reference domain to every other domain."""
        split = self.data.split
        ref = self.bottleneck(params, split.reference_domain)
        return {self.domain_names[d]: mean_pairwise_cosine_distance(ref, self.bottleneck(params, d))
                for d in split.all_domains if d != split.reference_domain}

    def validation_miou(self, params: M.Params, domains: Sequence[int]) -> float:
        cm = ConfusionMatrix()
        with ad.no_grad():
            for d in domains:
                for chunk in _batches(self.val_plan, 32):
                    logits = M.segment_forward(params, self.batch(chunk, d), self.seg_config).data
                    accumulate_confusion(cm, logits.argmax(axis=1), self.masks(chunk))
        return miou(cm)

    # -- stage 1 ----------------------------------------------------------

    def init_encoder(self, seed: int) -> M.Params:
        return M.init_encoder(self.config.encoder, _rng(seed, _INIT_ENCODER))

    def run_pretrain(self, seed: int, progress: Callable[[str], None] | None = None
                     ) -> tuple[M.Params, list[MetricRow]]:
        """Minimize the tuple loss over corresponding patches of all training domains."""
        c, split = self.config, self.data.split
        domains = list(split.train_domains)
        self._assert_seen(domains)
        params = self.init_encoder(seed)
        proj_cfg = M.ProjectorConfig(c.encoder.rep_dim)
        params.update(M.init_projector(proj_cfg, _rng(seed, _INIT_PROJECTOR)))
        loss_cfg = TupleLossConfig(lam=c.pretrain.lam, d=proj_cfg.out_dim)

        rows = [MetricRow(0, name, "cosine_distance", v, seed) for name, v in self.alignment(params).items()]
        steps = max(1, len(self.train_plan(seed, 1, _PRETRAIN_EPOCHS)) // c.pretrain.batch_size)
        sched = M.CyclicLRSchedule(c.pretrain.max_lr, c.pretrain.base_lr, steps)
        adam = M.AdamState()
        for epoch in range(1, c.pretrain.epochs + 1):
            losses = []
            for chunk in _batches(self.train_plan(seed, epoch, _PRETRAIN_EPOCHS), c.pretrain.batch_size):
                with ad.Tape() as tape:
                    embs = [M.project(params, M.encode(params, self.batch(chunk, d), c.encoder), proj_cfg)
                            for d in domains]
                    loss = barlow_tuple_loss(embs, loss_cfg)
                grads = tape.backward(loss)
                M.adam_step(adam, params, grads, M.cyclic_lr(sched, adam.step))
                losses.append(loss.item())
            rows.append(MetricRow(epoch, "all", "tuple_loss", float(np.mean(losses)), seed))
            align = self.alignment(params)
            rows.extend(MetricRow(epoch, name, "cosine_distance", v, seed) for name, v in align.items())
            if progress:
                progress(f"pretrain seed={seed} epoch={epoch} loss={np.mean(losses):.4f} "
                         + " ".join(f"{k}={v:.4f}" for k, v in align.items()))
        encoder = {k: v for k, v in params.items() if k.startswith("encoder.")}
        return encoder, rows

    # -- stage 2 ----------------------------------------------------------

    def segmenter_init(self, seed: int, encoder: M.Params | None) -> M.Params:
        params = self.init_encoder(seed)
        if encoder is not None:
            M.load_into(params, encoder)
        params.update(M.init_decoder(self.seg_config, _rng(seed, _INIT_DECODER)))
        return params

    def run_finetune(self, seed: int, mode: str, encoder: M.Params | None = None,
                     progress: Callable[[str], None] | None = None) -> tuple[M.Params, RunRecord]:
        """Train the segmenter; keep the epoch with the best validation mIoU."""
        pretrained, multi = _split_modes(mode)
        if pretrained and encoder is None:
            raise ConfigError(f"mode {mode} needs a pretrained encoder")
        c, split = self.config, self.data.split
        ref = split.reference_domain
        domains = list(split.train_domains) if multi else [ref]
        self._assert_seen(domains)

        params = self.segmenter_init(seed, encoder if pretrained else None)
        rows = self._finetune_rows(params, 0, domains, seed)
        best = (rows[0].value, 0, copy.deepcopy(params))
        steps = max(1, len(self.train_plan(seed, 1, _FINETUNE_EPOCHS)) // c.finetune.batch_size)
        sched = M.CyclicLRSchedule(c.finetune.max_lr, c.finetune.base_lr, steps)
        adam = M.AdamState()
        order = hashlib.sha256()
        for epoch in range(1, c.finetune.epochs + 1):
            plan = self.train_plan(seed, epoch, _FINETUNE_EPOCHS)
            order.update(plan_hash(plan).encode())
            draw = _rng(seed, _DOMAIN_DRAW, epoch).integers(0, len(split.train_domains), size=len(plan))
            patch_domains = [split.train_domains[k] if multi else ref for k in draw]
            self._assert_seen(patch_domains)
            losses = []
            for start in range(0, len(plan), c.finetune.batch_size):
                chunk = plan[start:start + c.finetune.batch_size]
                x = self.batch(chunk, patch_domains[start:start + len(chunk)])
                with ad.Tape() as tape:
                    loss = M.ce_dice_loss(M.segment_forward(params, x, self.seg_config), self.masks(chunk))
                grads = tape.backward(loss)
                M.adam_step(adam, params, grads, M.cyclic_lr(sched, adam.step))
                losses.append(loss.item())
            rows.append(MetricRow(epoch, "all", "train_loss", float(np.mean(losses)), seed))
            epoch_rows = self._finetune_rows(params, epoch, domains, seed)
            rows.extend(epoch_rows)
            if epoch_rows[0].value > best[0]:
                best = (epoch_rows[0].value, epoch, copy.deepcopy(params))
            if progress:
                progress(f"finetune {mode} seed={seed} epoch={epoch} loss={np.mean(losses):.4f} "
                         f"val_miou={epoch_rows[0].value:.4f}")
        record = RunRecord(c.hash(), seed, mode, rows, best[1], order.hexdigest())
        return best[2], record

    def _finetune_rows(self, params: M.Params, epoch: int, domains: Sequence[int], seed: int) -> list[MetricRow]:
        rows = [MetricRow(epoch, "val", "val_miou", self.validation_miou(params, domains), seed)]
        align = self.alignment(params)
        rows.extend(MetricRow(epoch, name, "cosine_distance", v, seed) for name, v in align.items())
        rows.append(MetricRow(epoch, "mean", "cosine_distance", float(np.mean(list(align.values()))), seed))
        return rows

    # -- evaluation -------------------------------------------------------

    def predict_slide(self, params: M.Params, slide_id: int, domain: int) -> np.ndarray:
        c = self.config

        def model(crops: np.ndarray) -> np.ndarray:
            with ad.no_grad():
                return M.segment_forward(params, normalize(crops, self.stats), self.seg_config).data

        return predict_tiled(self.data.image(slide_id, domain), model, c.patch, c.overlap)

    def run_eval(self, params: M.Params, record: RunRecord) -> RunRecord:
        """Per-domain test mIoU and concordance with the reference predictions."""
        split = self.data.split
        ref = split.reference_domain
        preds = {(i, d): self.predict_slide(params, i, d) for i in split.test for d in split.all_domains}
        for d in split.all_domains:
            name = self.domain_names[d]
            cm, agree = ConfusionMatrix(), ConfusionMatrix()
            for i in split.test:
                accumulate_confusion(cm, preds[i, d], self.data.masks[i])
                accumulate_confusion(agree, preds[i, d], preds[i, ref])
            record.test_miou[name] = miou(cm)
            record.concordance[name] = miou(agree)
            record.metrics.append(MetricRow(-1, name, "test_miou", record.test_miou[name], record.seed))
            record.metrics.append(MetricRow(-1, name, "concordance", record.concordance[name], record.seed))
        return record


# --------------------------------------------------------------------------
# reporting
# --------------------------------------------------------------------------

def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else float("nan")


def summarize(records: Sequence[RunRecord], pretrain_rows: Sequence[MetricRow] = ()) -> dict[str, str]:
    """Render the report bundle as ``{filename: text}``.

    ``table_miou.csv`` and ``concordance.csv`` mirror the per-mode by
    per-domain table; ``alignment_*.csv`` are the plot-ready distance traces.
    """
    if not records:
        raise ContractError("report needs at least one run record")
    files: dict[str, str] = {}
    modes = [m for m in MODES if any(r.mode == m for r in records)]
    domains = list(records[0].test_miou)

    for fname, attr in (("table_miou.csv", "test_miou"), ("concordance.csv", "concordance")):
        lines = ["mode,domain,mean,std,n"]
        for m in modes:
            for d in domains:
                vals = [getattr(r, attr)[d] for r in records if r.mode == m and d in getattr(r, attr)]
                if vals:
                    mu, sd = _mean_std(vals)
                    lines.append(f"{m},{d},{mu!r},{sd!r},{len(vals)}")
        files[fname] = "\n".join(lines) + "\n"

    def trace(rows: Iterable[tuple[str, MetricRow]]) -> str:
        groups: dict[tuple[str, int, str], list[float]] = {}
        for setting, r in rows:
            if r.metric == "cosine_distance":
                groups.setdefault((setting, r.epoch, r.domain), []).append(r.value)
        lines = ["setting,epoch,domain,mean,std,n"]
        for (setting, epoch, domain), vals in sorted(groups.items()):
            mu, sd = _mean_std(vals)
            lines.append(f"{setting},{epoch},{domain},{mu!r},{sd!r},{len(vals)}")
        return "\n".join(lines) + "\n"

    if pretrain_rows:
        files["alignment_pretrain.csv"] = trace(("pretrain", r) for r in pretrain_rows)
    ft = []
    for rec in records:
        pooled = "pretrained_pooled" if rec.mode.startswith("pretrained") else "baseline_pooled"
        for r in rec.metrics:
            ft.append((rec.mode, r))
            ft.append((pooled, r))
    files["alignment_finetune.csv"] = trace(ft)
    files["records.json"] = json.dumps([r.to_json() for r in records], indent=2, sort_keys=True) + "\n"
    return files


def metric_csv(rows: Sequence[MetricRow]) -> str:
    return format_metric_csv(rows)
