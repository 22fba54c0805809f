"""Training loop, checkpoints, batched prediction, evaluation and single-image inference."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .config import RunConfig, config_from_dict
from .data import CategoryRegistry, HOISample, ZeroShotSplit, filter_seen, hoi_counts, load_dataset, read_image
from .errors import ChecksumError, ConfigError, ContaminationError, DataError, DivergenceError, InvalidInputError
from .evaluation import (
    Detection,
    detections_from_predictions,
    evaluate_hico,
    gts_from_samples,
    save_detections,
    write_report,
)
from .foundation import FileCacheProvider, FoundationProvider, MockFoundationProvider, RemoteFoundationProvider
from .interaction import HOIDetection, score_predictions
from .knowledge import MockTextEncoder, RemoteTextEncoder, TextEncoder, embed_text
from .matching import make_target, match_and_loss
from .model import HOIDetector, ModelConfig

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1


# ---------------------------------------------------------------------------
# providers and features


def build_provider(cfg: RunConfig) -> FoundationProvider:
    p = cfg.provider
    if p.kind == "mock":
        return MockFoundationProvider(seed=p.seed)
    if p.kind == "cache":
        return FileCacheProvider(cfg.resolve(p.cache_path))
    return RemoteFoundationProvider(p.endpoint, timeout=p.timeout, retries=p.retries)


def build_text_encoder(cfg: RunConfig) -> TextEncoder:
    k = cfg.knowledge
    if k.backend == "http" and k.endpoint:
        return RemoteTextEncoder(k.endpoint, timeout=k.timeout, retries=k.retries)
    return MockTextEncoder(seed=k.encoder_seed)


class FeatureStore:
    """Provider features computed once per image id and reused every step."""

    def __init__(self, provider: FoundationProvider):
        self.provider = provider
        self._tokens: Dict[str, torch.Tensor] = {}
        self._globals: Dict[str, torch.Tensor] = {}

    def get(self, sample: HOISample) -> Tuple[torch.Tensor, torch.Tensor]:
        if sample.image_id not in self._tokens:
            ft = self.provider.features(sample.image, sample.image_id)
            self._tokens[sample.image_id] = torch.from_numpy(np.array(ft.tokens, dtype=np.float32))
            self._globals[sample.image_id] = torch.from_numpy(np.array(ft.global_embedding, dtype=np.float32))
        return self._tokens[sample.image_id], self._globals[sample.image_id]

    def batch(self, samples: Sequence[HOISample]) -> Tuple[torch.Tensor, torch.Tensor]:
        pairs = [self.get(s) for s in samples]
        return torch.stack([t for t, _ in pairs]), torch.stack([g for _, g in pairs])


def collate_images(samples: Sequence[HOISample]) -> torch.Tensor:
    """Stack images, zero-padding bottom/right to the largest in the batch."""
    h = max(s.height for s in samples)
    w = max(s.width for s in samples)
    c = samples[0].image.shape[2]
    out = np.zeros((len(samples), h, w, c), dtype=np.float32)
    for i, s in enumerate(samples):
        out[i, : s.height, : s.width] = s.image
    return torch.from_numpy(out)


def model_config(cfg: RunConfig, registry: CategoryRegistry, in_channels: int = 3) -> ModelConfig:
    m = cfg.model
    return ModelConfig(
        d_v=m.d_v, n_q=m.n_q, heads=m.heads, ffn_dim=m.ffn_dim, stride=m.stride, in_channels=in_channels,
        encoder_layers=m.encoder_layers, decoder_layers=m.decoder_layers, variant=m.variant,
        num_objects=registry.num_objects, num_verbs=registry.num_verbs, num_hois=registry.num_hois,
        label_space=m.label_space, dropout=m.dropout, aux_loss=m.aux_loss,
    )


# ---------------------------------------------------------------------------
# checkpoints


def _params_checksum(state_dict) -> str:
    h = hashlib.sha256()
    for name in sorted(state_dict):
        t = state_dict[name].detach().cpu().contiguous()
        h.update(name.encode() + b"\0" + str(t.dtype).encode() + str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


@dataclass
class Checkpoint:
    model: HOIDetector
    config: RunConfig
    registry: CategoryRegistry
    step: int
    config_digest: str
    split_digest: Optional[str] = None
    optimizer_state: Optional[dict] = None
    rng_state: Optional[dict] = None
    extra: dict = field(default_factory=dict)


def save_checkpoint(path, model: HOIDetector, cfg: RunConfig, registry: CategoryRegistry, step: int,
                    optimizer=None, split_digest: Optional[str] = None, rng_state: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    params = {k: v.detach().clone() for k, v in model.state_dict().items()}
    payload = {
        "format_version": CHECKPOINT_FORMAT,
        "config": cfg.to_dict(),
        "config_digest": cfg.digest(),
        "model_config": model.cfg.to_dict(),
        "registry": registry.to_json(),
        "step": int(step),
        "split_digest": split_digest,
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "rng_state": rng_state,
        "params": params,
        "checksum": _params_checksum(params),
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)
    return path


def load_checkpoint(path, base_dir=".") -> Checkpoint:
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint not found: {path}") from exc
    except Exception as exc:
        raise ChecksumError(f"unreadable checkpoint {path}: {exc}") from exc
    if payload.get("format_version") != CHECKPOINT_FORMAT:
        raise ChecksumError(f"unsupported checkpoint format {payload.get('format_version')!r}")
    if _params_checksum(payload["params"]) != payload["checksum"]:
        raise ChecksumError(f"checkpoint {path} failed checksum verification")
    cfg = config_from_dict(payload["config"], base_dir=base_dir)
    model = HOIDetector(ModelConfig(**payload["model_config"]))
    model.load_state_dict(payload["params"])
    model.eval()
    return Checkpoint(
        model, cfg, CategoryRegistry.from_json(payload["registry"]), payload["step"], payload["config_digest"],
        payload["split_digest"], payload["optimizer"], payload["rng_state"],
    )


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: HOIDetector
    losses: List[dict]
    checkpoint: Optional[Path]
    split_digest: Optional[str]


def make_optimizer(model: HOIDetector, cfg: RunConfig) -> torch.optim.Optimizer:
    t = cfg.train
    backbone = set(id(p) for p in model.backbone_parameters())
    rest = [p for p in model.parameters() if id(p) not in backbone and p.requires_grad]
    groups = [
        {"params": [p for p in model.backbone_parameters() if p.requires_grad], "lr": t.lr * t.backbone_lr_mult},
        {"params": rest, "lr": t.lr},
    ]
    return torch.optim.AdamW(groups, lr=t.lr, weight_decay=t.weight_decay)


class _BatchOrder:
    """Seeded epoch-wise shuffling with a resumable cursor."""

    def __init__(self, n: int, batch_size: int, seed: int):
        self.n, self.batch_size, self.seed = n, batch_size, seed
        self.epoch, self.cursor = 0, 0
        self._perm = self._permutation()

    def _permutation(self) -> np.ndarray:
        return np.random.default_rng([self.seed, self.epoch]).permutation(self.n)

    def next(self) -> np.ndarray:
        if self.cursor >= self.n:
            self.epoch += 1
            self.cursor = 0
            self._perm = self._permutation()
        idx = self._perm[self.cursor: self.cursor + self.batch_size]
        self.cursor += len(idx)
        return idx

    def state(self) -> dict:
        return {"epoch": self.epoch, "cursor": self.cursor}

    def restore(self, state: dict) -> None:
        self.epoch, self.cursor = state["epoch"], state["cursor"]
        self._perm = self._permutation()


def train_samples(samples: Sequence[HOISample], registry: CategoryRegistry, cfg: RunConfig,
                  provider: Optional[FoundationProvider] = None, out_dir=None,
                  split: Optional[ZeroShotSplit] = None, resume=None, log_path=None) -> TrainResult:
    """Train on in-memory samples; see :func:`train` for the file-driven entry point."""
    t = cfg.train
    if split is not None:
        samples = filter_seen(samples, split)
    if not samples:
        raise DataError("no training samples (after split filtering)")
    split_digest = split.digest() if split is not None else None
    provider = provider or build_provider(cfg)
    features = FeatureStore(provider)
    weights = t.loss_weights()

    torch.manual_seed(t.seed)
    model = HOIDetector(model_config(cfg, registry, samples[0].image.shape[2]))
    optimizer = make_optimizer(model, cfg)
    order = _BatchOrder(len(samples), t.batch_size, t.seed)
    start = 0
    if resume is not None:
        ckpt = load_checkpoint(resume, cfg.base_dir)
        if ckpt.config_digest != cfg.digest():
            raise ConfigError(f"refusing to resume from {resume}: it was trained under a different config")
        if ckpt.split_digest != split_digest:
            raise ContaminationError(f"refusing to resume from {resume}: it was trained under a different split")
        model.load_state_dict(ckpt.model.state_dict())
        optimizer.load_state_dict(ckpt.optimizer_state)
        if ckpt.rng_state:
            order.restore(ckpt.rng_state)
        start = ckpt.step

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    log_path = Path(log_path) if log_path is not None else (out_dir / "losses.jsonl" if out_dir else None)
    log_fh = log_path.open("a" if resume is not None else "w") if log_path is not None else None

    def checkpoint(step):
        if out_dir is None:
            return None
        path = out_dir / f"checkpoint_{step:06d}.pt"
        save_checkpoint(path, model, cfg, registry, step, optimizer, split_digest, order.state())
        save_checkpoint(out_dir / "last.pt", model, cfg, registry, step, optimizer, split_digest, order.state())
        return path

    losses: List[dict] = []
    last_ckpt = checkpoint(start) if out_dir is not None and resume is None else (Path(resume) if resume else None)
    model.train()
    try:
        for step in range(start, t.steps):
            batch = [samples[i] for i in order.next()]
            images = collate_images(batch)
            tokens, globals_ = features.batch(batch)
            outputs = model(images, tokens)
            targets = [make_target(s, model.cfg.num_labels, outputs.canvas, label_space=model.cfg.label_space)
                       for s in batch]
            report, _ = match_and_loss(outputs, targets, globals_, weights)
            if not torch.isfinite(report.total):
                raise DivergenceError(
                    f"non-finite loss at step {step}; last finite checkpoint: {last_ckpt}", step=step,
                    checkpoint=last_ckpt,
                )
            optimizer.zero_grad(set_to_none=True)
            report.total.backward()
            if t.grad_clip and t.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), t.grad_clip)
            optimizer.step()
            record = {"step": step + 1, **report.to_dict()}
            losses.append(record)
            if log_fh is not None and ((step + 1) % max(t.log_every, 1) == 0 or step + 1 == t.steps):
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            if out_dir is not None and t.checkpoint_every and (step + 1) % t.checkpoint_every == 0:
                last_ckpt = checkpoint(step + 1)
    finally:
        if log_fh is not None:
            log_fh.close()
    if out_dir is not None and (not losses or losses[-1]["step"] % max(t.checkpoint_every, 1) != 0):
        last_ckpt = checkpoint(t.steps)
    model.eval()
    return TrainResult(model, losses, last_ckpt, split_digest)


def _load_registry(cfg: RunConfig) -> CategoryRegistry:
    path = cfg.resolve(cfg.data.registry)
    if path is None:
        raise ConfigError("data.registry is required")
    if not path.exists():
        raise DataError(f"registry file not found: {path}")
    return CategoryRegistry.load(path)


def _load_samples(cfg: RunConfig, which: str, registry: CategoryRegistry) -> List[HOISample]:
    path = cfg.resolve(getattr(cfg.data, which))
    if path is None:
        raise ConfigError(f"data.{which} is required")
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    return load_dataset(path, registry)


def _load_split(cfg: RunConfig, registry: CategoryRegistry, override=None) -> Optional[ZeroShotSplit]:
    path = Path(override) if override is not None else cfg.resolve(cfg.data.split)
    if path is None:
        return None
    if not path.exists():
        raise DataError(f"split file not found: {path}")
    return ZeroShotSplit.load(path, registry)


def train(cfg: RunConfig, resume=None) -> TrainResult:
    registry = _load_registry(cfg)
    samples = _load_samples(cfg, "train", registry)
    split = _load_split(cfg, registry)
    return train_samples(samples, registry, cfg, out_dir=cfg.resolve(cfg.train.out_dir), split=split, resume=resume)


# ---------------------------------------------------------------------------
# prediction and evaluation


def predict(model: HOIDetector, samples: Sequence[HOISample], registry: CategoryRegistry,
            features: FeatureStore, top_k: int = 100, batch_size: int = 4, threshold: float = 0.0,
            text_embeddings: Optional[np.ndarray] = None, text_hoi_ids=None) -> List[List[HOIDetection]]:
    """Ranked detections per sample; open mode when ``text_embeddings`` is given."""
    model.eval()
    out: List[List[HOIDetection]] = []
    with torch.no_grad():
        for i in range(0, len(samples), batch_size):
            batch = samples[i: i + batch_size]
            images = collate_images(batch)
            tokens, _ = features.batch(batch)
            outputs = model(images, tokens)
            insts = _instances(outputs)
            canvas = [outputs.canvas] * len(batch)
            if text_embeddings is None:
                out.extend(score_predictions(insts, outputs.verb_logits, registry, canvas, "closed",
                                             top_k=top_k, threshold=threshold,
                                             label_space=model.cfg.label_space))
            else:
                logits = model.open_logits(outputs, text_embeddings)
                out.extend(score_predictions(insts, logits, registry, canvas, "open", text_hoi_ids,
                                             top_k=top_k, threshold=threshold))
    return out


def _instances(outputs):
    from .detector import InstancePredictions

    return InstancePredictions(outputs.human_boxes, outputs.object_boxes, outputs.object_logits)


def evaluate_model(model: HOIDetector, samples: Sequence[HOISample], registry: CategoryRegistry,
                   provider: FoundationProvider, counts: Dict[int, int], split: Optional[ZeroShotSplit] = None,
                   top_k: int = 100) -> Tuple[dict, List[dict], List[Detection]]:
    """Closed-set evaluation; returns (report, csv rows, detections)."""
    preds = predict(model, samples, registry, FeatureStore(provider), top_k=top_k)
    dets = detections_from_predictions([s.image_id for s in samples], preds)
    gts = gts_from_samples(samples)
    report: dict = {"num_images": len(samples), "num_detections": len(dets)}
    rows = []
    for setting in ("default", "known_objects"):
        full = evaluate_hico(dets, gts, registry, counts, setting)
        section = full.to_json()
        row = {"setting": setting, "full": full.full, "rare": full.rare, "non_rare": full.non_rare}
        if split is not None:
            zs = _zero_shot(dets, gts, registry, counts, setting, split)
            section["zero_shot"] = zs
            row.update({"unseen": zs.get("unseen"), "seen": zs["seen"]})
        report[setting] = section
        rows.append(row)
    if split is not None:
        report["split"] = {"kind": split.kind, "digest": split.digest()}
    return report, rows, dets


def _zero_shot(dets, gts, registry, counts, setting, split: ZeroShotSplit) -> dict:
    out = {"full": evaluate_hico(dets, gts, registry, counts, setting).full,
           "seen": evaluate_hico(dets, gts, registry, counts, setting, classes=split.seen_hoi_ids).full}
    if split.unseen_hoi_ids:
        unseen = evaluate_hico(dets, gts, registry, counts, setting, classes=split.unseen_hoi_ids).full
        if unseen is not None:
            out["unseen"] = unseen
    return out


def check_split(ckpt: Checkpoint, split: Optional[ZeroShotSplit]) -> None:
    if split is None:
        return
    if ckpt.split_digest != split.digest():
        raise ContaminationError(
            f"checkpoint was trained under split digest {ckpt.split_digest}, not {split.digest()}; "
            "zero-shot numbers would be contaminated"
        )


def run_eval(cfg: RunConfig, checkpoint, split_path=None, out_dir=None) -> dict:
    ckpt = load_checkpoint(checkpoint, cfg.base_dir)
    registry = ckpt.registry
    split = _load_split(cfg, registry, split_path)
    check_split(ckpt, split)
    samples = _load_samples(cfg, "test", registry)
    train_path = cfg.resolve(cfg.data.train)
    counts = hoi_counts(load_dataset(train_path, registry), registry) if train_path and train_path.exists() \
        else hoi_counts(samples, registry)
    report, rows, dets = evaluate_model(ckpt.model, samples, registry, build_provider(cfg), counts, split,
                                        cfg.eval.top_k)
    report["checkpoint_step"] = ckpt.step
    out_dir = Path(out_dir) if out_dir is not None else cfg.resolve(cfg.eval.out_dir or cfg.train.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_detections(dets, out_dir / "detections.jsonl")
    write_report(report, out_dir / "report.json", out_dir / "report.csv", rows)
    return report


# ---------------------------------------------------------------------------
# single-image inference


def infer(checkpoint, image_path, texts: Optional[Sequence[str]] = None, open_mode: bool = False,
          out_prefix=None, top_k: int = 20, threshold: float = 0.0) -> Tuple[dict, Path, Path]:
    """Detections for one image; writes ``<prefix>.json`` and ``<prefix>.png``."""
    ckpt = load_checkpoint(checkpoint)
    registry, cfg = ckpt.registry, ckpt.config
    image_path = Path(image_path)
    if not image_path.exists():
        raise DataError(f"image not found: {image_path}")
    image = read_image(image_path)
    if image.ndim == 2:
        image = image[:, :, None]
    sample = HOISample(np.asarray(image, dtype=np.float32), (), image_path.stem)
    texts = [t for t in (texts or []) if t.strip()]
    if open_mode and not texts:
        raise InvalidInputError("open-category inference needs at least one text")
    embeddings = None
    if open_mode:
        encoder = build_text_encoder(cfg)
        embeddings = np.stack([embed_text(t, encoder).vector for t in texts]).astype(np.float32)
    features = FeatureStore(build_provider(cfg))
    dets = predict(ckpt.model, [sample], registry, features, top_k=top_k, threshold=threshold,
                   text_embeddings=embeddings)[0]

    def label(d: HOIDetection) -> str:
        return texts[d.hoi_class] if open_mode else registry.phrase(d.hoi_class)

    doc = {
        "image": str(image_path),
        "mode": "open" if open_mode else "closed",
        "texts": list(texts) if open_mode else [],
        "detections": [
            {"h_box": list(d.human_box), "o_box": list(d.object_box), "hoi": d.hoi_class,
             "object": d.object_class, "label": label(d), "score": d.score}
            for d in dets
        ],
    }
    prefix = Path(out_prefix) if out_prefix is not None else image_path.with_name(image_path.stem + "_hoi")
    prefix.parent.mkdir(parents=True, exist_ok=True)
    json_path = prefix.with_name(prefix.name + ".json")
    png_path = prefix.with_name(prefix.name + ".png")
    json_path.write_text(json.dumps(doc, indent=2) + "\n")
    draw_detections(image, dets[: min(len(dets), 5)], [label(d) for d in dets[:5]], png_path)
    return doc, json_path, png_path


def draw_detections(image: np.ndarray, dets: Sequence[HOIDetection], labels: Sequence[str], path) -> None:
    from PIL import Image, ImageDraw

    arr = np.clip(np.round(np.asarray(image, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    scale = max(1, int(math.ceil(256 / max(arr.shape[:2]))))
    im = Image.fromarray(arr[:, :, :3]).resize((arr.shape[1] * scale, arr.shape[0] * scale), Image.NEAREST)
    draw = ImageDraw.Draw(im)
    for d, text in zip(dets, labels):
        hb = [c * scale for c in d.human_box]
        ob = [c * scale for c in d.object_box]
        draw.rectangle(hb, outline=(255, 64, 64), width=2)
        draw.rectangle(ob, outline=(64, 128, 255), width=2)
        draw.line([((hb[0] + hb[2]) / 2, (hb[1] + hb[3]) / 2), ((ob[0] + ob[2]) / 2, (ob[1] + ob[3]) / 2)],
                  fill=(255, 255, 0), width=1)
        draw.text((hb[0] + 2, hb[1] + 2), f"{text} {d.score:.2f}", fill=(255, 255, 255))
    im.save(path)
