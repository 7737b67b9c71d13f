"""Training loop, ablation modes, checkpointing, and model inference.

One optimizer (Adam with cosine-decayed learning rate) writes the
parameters; the data order, initialization, and every numeric op are
seeded, so a fixed seed reproduces the training log bit for bit on the
same machine. Validation runs on a fixed cadence; the best checkpoint by
validation score (foreground Dice when masks supervise training, negative
MSE otherwise) is kept.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import random
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import io as volio
from .data import RegistrationPair, load_split_pairs, read_manifest
from .errors import ConfigError, ContractError, NumericError
from .fieldops import DisplacementField, LabelVolume, warp_tensor
from .memory import MemoryConfig
from .metrics import dice_score
from .network import LapWarp, NetworkConfig
from .objective import LossWeights, composite_loss

log = logging.getLogger(__name__)

TRAIN_LOG_COLUMNS = ("step", "sim", "dsc", "reg", "rgn", "total")


@dataclass(frozen=True)
class AblationFlags:
    """The three switchable components. Mode ids follow the ablation table:
    1=(-,-,-) 2=(P,-,-) 3=(-,D,-) 4=(P,-,M) 5=(-,D,M) 6=(P,D,M)."""

    pyramid: bool = True
    dice_loss: bool = True
    memory: bool = True

    _MODES = {
        1: (False, False, False),
        2: (True, False, False),
        3: (False, True, False),
        4: (True, False, True),
        5: (False, True, True),
        6: (True, True, True),
    }

    @classmethod
    def from_mode(cls, mode: int) -> "AblationFlags":
        if mode not in cls._MODES:
            raise ConfigError(f"ablation mode must be 1..6, got {mode}")
        p, d, m = cls._MODES[mode]
        return cls(pyramid=p, dice_loss=d, memory=m)

    @property
    def mode_id(self) -> int:
        key = (self.pyramid, self.dice_loss, self.memory)
        for k, v in self._MODES.items():
            if v == key:
                return k
        raise ConfigError(f"flag combination {key} is not an ablation mode")

    @property
    def semi_supervised(self) -> bool:
        return self.dice_loss or self.memory

    @property
    def needs_masks(self) -> bool:
        return self.semi_supervised


@dataclass
class TrainConfig:
    """Hyperparameters of one training run."""

    steps: int = 1500
    epochs: int | None = None  # overrides steps when set
    batch_size: int = 4
    learning_rate: float = 4e-4
    smoothness: float = 0.01  # lambda_1
    integration_steps: int = 7
    levels: int = 3
    encoder_channels: tuple[int, ...] = (8, 16, 32)
    use_large_kernel: bool = False
    memory_slots: int = 4
    ablation: AblationFlags = field(default_factory=AblationFlags)
    val_interval: int = 50
    seed: int = 0
    device: str = "cpu"

    def __post_init__(self):
        if isinstance(self.ablation, dict):
            self.ablation = AblationFlags(**self.ablation)
        if isinstance(self.ablation, int):
            self.ablation = AblationFlags.from_mode(self.ablation)
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        if self.steps < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigError("steps, batch size, and learning rate must be positive")
        if self.epochs is not None and self.epochs < 1:
            raise ConfigError("epochs must be positive when set")

    def network_config(self) -> NetworkConfig:
        return NetworkConfig(
            levels=self.levels,
            encoder_channels=self.encoder_channels,
            use_large_kernel=self.use_large_kernel,
            pyramid=self.ablation.pyramid,
            integration_steps=self.integration_steps,
        )

    def memory_config(self) -> MemoryConfig | None:
        return MemoryConfig(slots=self.memory_slots) if self.ablation.memory else None

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            smoothness=self.smoothness,
            dice_term=self.ablation.dice_loss,
            region_term=self.ablation.memory,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


def full_scale_config() -> TrainConfig:
    """Published-scale preset: 4 levels on 128x128x16 inputs, 400 epochs."""
    return TrainConfig(
        steps=1500,
        epochs=400,
        levels=4,
        encoder_channels=(16, 32, 64, 128),
        use_large_kernel=True,
    )


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Cosine decay from base_lr at step 0 to exactly 0 at step = total."""
    if total_steps <= 0:
        return 0.0
    t = min(max(step, 0), total_steps) / total_steps
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * t))


def seed_everything(seed: int):
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def build_model(config: TrainConfig) -> LapWarp:
    seed_everything(config.seed)
    return LapWarp(config.network_config(), config.memory_config()).to(config.device)


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------

def pair_tensors(pair: RegistrationPair, with_masks: bool):
    moving = torch.from_numpy(pair.moving_image.data).float().unsqueeze(0)
    fixed = torch.from_numpy(pair.fixed_image.data).float().unsqueeze(0)
    if not with_masks:
        return moving, fixed, None, None
    if pair.moving_seg is None or pair.fixed_seg is None:
        raise ContractError(f"pair {pair.pair_id} has no masks but training needs them")
    mseg = torch.from_numpy(pair.moving_seg.data.astype(np.int64))
    fseg = torch.from_numpy(pair.fixed_seg.data.astype(np.int64))
    return moving, fixed, mseg, fseg


def collate(pairs, with_masks: bool):
    items = [pair_tensors(p, with_masks) for p in pairs]
    moving = torch.stack([i[0] for i in items])
    fixed = torch.stack([i[1] for i in items])
    if not with_masks:
        return moving, fixed, None, None
    mseg = torch.stack([i[2] for i in items])
    fseg = torch.stack([i[3] for i in items])
    return moving, fixed, mseg, fseg


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path, model: LapWarp, config: TrainConfig, step: int, history: list,
                    meta: dict | None = None):
    """Zip archive: JSON manifest (tensor names/shapes/dtypes, config,
    step, metric history, dataset metadata) plus one raw little-endian
    blob of all tensors."""
    state = model.state_dict()
    tensors, blob = [], bytearray()
    for name, t in state.items():
        arr = t.detach().cpu().numpy()
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        tensors.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": arr.dtype.str.lstrip("<>|="),
                "offset": len(blob),
                "nbytes": arr.nbytes,
            }
        )
        blob.extend(np.ascontiguousarray(arr).tobytes())
    manifest = {
        "format": "memwarp-checkpoint",
        "version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "step": step,
        "history": history,
        "meta": meta or {},
        "tensors": tensors,
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        info = zipfile.ZipInfo("manifest.json", date_time=(1980, 1, 1, 0, 0, 0))
        zf.writestr(info, json.dumps(manifest, indent=2, sort_keys=True))
        info = zipfile.ZipInfo("tensors.bin", date_time=(1980, 1, 1, 0, 0, 0))
        zf.writestr(info, bytes(blob))


@dataclass
class Checkpoint:
    config: TrainConfig
    model: LapWarp
    step: int
    history: list
    meta: dict


def load_checkpoint(path) -> Checkpoint:
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            blob = zf.read("tensors.bin")
    except (zipfile.BadZipFile, KeyError, FileNotFoundError) as err:
        raise ConfigError(f"cannot read checkpoint {path}: {err}") from err
    if manifest.get("format") != "memwarp-checkpoint":
        raise ConfigError(f"{path} is not a memwarp checkpoint")
    cfg_dict = dict(manifest["config"])
    cfg_dict["ablation"] = AblationFlags(**cfg_dict["ablation"])
    config = TrainConfig.from_dict(cfg_dict)
    model = LapWarp(config.network_config(), config.memory_config())
    state = {}
    for meta in manifest["tensors"]:
        arr = np.frombuffer(
            blob, dtype=np.dtype(meta["dtype"]).newbyteorder("<"),
            count=int(np.prod(meta["shape"])) if meta["shape"] else 1,
            offset=meta["offset"],
        ).reshape(meta["shape"])
        state[meta["name"]] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    model.eval()
    return Checkpoint(
        config=config, model=model, step=manifest["step"],
        history=manifest["history"], meta=manifest.get("meta", {}),
    )


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def validation_score(model: LapWarp, pairs, flags: AblationFlags, chunk: int = 4) -> float:
    """Higher is better: mean foreground Dice (semi-supervised) or negative
    image MSE (unsupervised). Pairs are forwarded in small batches."""
    model.eval()
    dices, mses = [], []
    with torch.no_grad():
        for start in range(0, len(pairs), chunk):
            group = pairs[start : start + chunk]
            moving, fixed, mseg, fseg = collate(group, flags.needs_masks)
            state = model(moving, fixed)
            if flags.needs_masks:
                warped = warp_tensor(mseg.unsqueeze(1).float(), state.disp, mode="nearest")
                for b, pair in enumerate(group):
                    warped_np = warped[b, 0].numpy().astype(pair.moving_seg.data.dtype)
                    warped_lbl = replace_labels(pair.moving_seg, warped_np)
                    ks = range(1, pair.moving_seg.num_classes)
                    dices.append(
                        float(np.mean([dice_score(pair.fixed_seg, warped_lbl, k) for k in ks]))
                    )
            else:
                warped = warp_tensor(moving, state.disp)
                mses.extend(
                    float(v) for v in (warped - fixed).pow(2).mean(dim=(1, 2, 3, 4))
                )
    model.train()
    return float(np.mean(dices)) if dices else -float(np.mean(mses))


def replace_labels(template, data):
    return LabelVolume(data=data, num_classes=template.num_classes, spacing=template.spacing)


@dataclass
class TrainResult:
    checkpoint_path: Path
    best_score: float
    best_step: int
    history: list


def train(config: TrainConfig, data_root, out_dir) -> TrainResult:
    """Train on the phantom dataset under `data_root`, writing
    train_log.csv, val_log.csv, and the best checkpoint to `out_dir`."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = read_manifest(data_root)

    flags = config.ablation
    net_cfg = config.network_config()
    net_cfg.validate_displacement_range(manifest.get("d_max", 0.0))
    if flags.memory and config.memory_slots != manifest["num_classes"]:
        raise ConfigError(
            f"memory slots ({config.memory_slots}) must equal the dataset's "
            f"class count ({manifest['num_classes']})"
        )

    train_pairs = load_split_pairs(data_root, "train", with_masks=flags.needs_masks)
    val_pairs = load_split_pairs(data_root, "val", with_masks=flags.needs_masks)
    if not train_pairs or not val_pairs:
        raise ConfigError("dataset needs non-empty train and val splits")

    model = build_model(config)
    model.train()
    weights = config.loss_weights()
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    order_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 404]))

    steps = config.steps
    if config.epochs is not None:
        steps = config.epochs * max(1, math.ceil(len(train_pairs) / config.batch_size))

    def batches():
        while True:
            idx = order_rng.permutation(len(train_pairs))
            for start in range(0, len(idx) - config.batch_size + 1, config.batch_size):
                yield [train_pairs[i] for i in idx[start : start + config.batch_size]]

    history = []
    best_score, best_step, best_state = -float("inf"), -1, None
    train_log = open(out / "train_log.csv", "w", newline="")
    writer = csv.writer(train_log)
    writer.writerow(TRAIN_LOG_COLUMNS)
    val_log = open(out / "val_log.csv", "w", newline="")
    val_writer = csv.writer(val_log)
    val_writer.writerow(["step", "score", "lr"])

    try:
        for step, batch in zip(range(steps), batches()):
            lr = cosine_lr(step, steps, config.learning_rate)
            for group in opt.param_groups:
                group["lr"] = lr

            moving, fixed, mseg, fseg = collate(batch, flags.needs_masks)
            state = model(moving, fixed)
            breakdown = composite_loss(
                fixed, moving, state.disp, weights,
                fixed_labels=fseg, moving_labels=mseg,
                addresses=state.addresses if flags.memory else None,
                num_classes=manifest["num_classes"] if flags.needs_masks else None,
            )
            if not breakdown.is_finite():
                dump = breakdown.floats()
                log.error("non-finite loss at step %d: %s", step, dump)
                raise NumericError(f"non-finite loss at step {step}: {dump}")

            opt.zero_grad()
            breakdown.total.backward()
            opt.step()

            vals = breakdown.floats()
            writer.writerow([step] + [repr(vals[k]) for k in TRAIN_LOG_COLUMNS[1:]])

            if (step + 1) % config.val_interval == 0 or step == steps - 1:
                score = validation_score(model, val_pairs, flags)
                val_writer.writerow([step, repr(score), repr(lr)])
                history.append({"step": step, "val_score": score})
                if score > best_score:
                    best_score, best_step = score, step
                    best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    finally:
        train_log.close()
        val_log.close()

    if best_state is not None:
        model.load_state_dict(best_state)
    ckpt_path = out / "checkpoint.zip"
    meta = {
        "shape": manifest["shape"],
        "spacing": manifest["spacing"],
        "num_classes": manifest["num_classes"],
        "class_names": manifest["class_names"],
    }
    save_checkpoint(ckpt_path, model, config, best_step, history, meta=meta)
    return TrainResult(
        checkpoint_path=ckpt_path, best_score=best_score, best_step=best_step, history=history
    )


# ---------------------------------------------------------------------------
# Inference helpers
# ---------------------------------------------------------------------------

def predict_field(model: LapWarp, moving, fixed) -> DisplacementField:
    """Register one volume pair; no segmentation inputs exist on this path,
    and the IO layer is asserted untouched for labels while it runs."""
    labels_before = volio.read_counts()["label"]
    model.eval()
    with torch.no_grad():
        m = torch.from_numpy(moving.data).float().reshape(1, 1, *moving.data.shape)
        f = torch.from_numpy(fixed.data).float().reshape(1, 1, *fixed.data.shape)
        state = model(m, f)
        disp = state.disp.squeeze(0)
    assert volio.read_counts()["label"] == labels_before, "inference read a segmentation mask"
    vec = np.moveaxis(disp.numpy(), 0, -1)
    return DisplacementField(vectors=vec, spacing=fixed.spacing)
