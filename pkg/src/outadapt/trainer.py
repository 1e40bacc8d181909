"""Joint one-stage adversarial training of the segmentation network and its
discriminators, plus checkpoint persistence.

Each step updates G once on (source loss + weighted adversarial loss on the
target image) with every discriminator frozen, then updates each
discriminator once on the detached source and target predictions.
"""
import csv
import hashlib
import io
import json
import logging
import math
import struct
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import losses
from . import tensor as T
from .exceptions import (ConfigHashError, ConfigurationError, MagicError, NumericalError,
                         TruncatedError, VersionError)
from .networks import Params, SegNetSpec, init_discriminator, init_segnet
from .optim import D_BASE_LR, G_BASE_LR, SGD, Adam, PolySchedule
from .tensor import Tensor

log = logging.getLogger(__name__)

MODES = ("source_only", "feature", "single_level", "multi_level")
GAN_OBJECTIVES = tuple(losses.GAN_LOSSES)

# Desk-scale G learning rate: with pixel-summed losses on a network trained from
# scratch, the 2.5e-4 base diverges within a few hundred steps.
DEFAULT_LR_G = 2e-5
# D keeps the base G:D ratio; at the full 1e-4 it saturates within a few
# hundred steps and the adversarial gradient through the sigmoid vanishes.
DEFAULT_LR_D = D_BASE_LR * DEFAULT_LR_G / G_BASE_LR

SINGLE_WEIGHTS = ((1.0,), (0.001,))
MULTI_WEIGHTS = ((1.0, 0.1), (0.001, 0.0002))

CSV_HEADER = ("step", "lr_g", "lr_d", "seg1", "seg2", "adv1", "adv2", "d1", "d2", "ms")


@dataclass
class TrainConfig:
    mode: str = "single_level"
    gan: str = "vanilla"
    lambda_seg: tuple = None
    lambda_adv: tuple = None
    total_steps: int = 3000
    seed: int = 0
    lr_g: float = DEFAULT_LR_G
    lr_d: float = DEFAULT_LR_D
    power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.99)
    n_classes: int = 4
    widths: tuple = (16, 32, 64, 64, 64)
    checkpoint_interval: int = 0
    data: str = None
    source_split: str = "source_train"
    target_split: str = "target_train"
    out: str = None
    log_timing: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.gan not in GAN_OBJECTIVES:
            raise ConfigurationError(f"gan must be one of {GAN_OBJECTIVES}, got {self.gan!r}")
        seg_default, adv_default = MULTI_WEIGHTS if self.mode == "multi_level" else SINGLE_WEIGHTS
        self.lambda_seg = tuple(float(v) for v in (self.lambda_seg or seg_default))
        self.lambda_adv = tuple(float(v) for v in (self.lambda_adv or adv_default))
        self.widths = tuple(int(v) for v in self.widths)
        self.betas = tuple(float(v) for v in self.betas)
        need = 2 if self.mode == "multi_level" else 1
        if len(self.lambda_seg) != need or len(self.lambda_adv) != need:
            raise ConfigurationError(
                f"mode {self.mode} needs {need} weight(s) per loss, got "
                f"lambda_seg={self.lambda_seg} lambda_adv={self.lambda_adv}")
        if self.total_steps < 0:
            raise ConfigurationError("total_steps must be non-negative")
        losses.LossWeights(self.lambda_seg, self.lambda_adv)

    @property
    def weights(self):
        return losses.LossWeights(self.lambda_seg, self.lambda_adv)

    @property
    def levels(self):
        return self.weights.levels

    @property
    def n_discriminators(self):
        return 0 if self.mode == "source_only" else self.levels

    def seg_spec(self):
        return SegNetSpec(n_classes=self.n_classes, widths=self.widths)

    def structure(self):
        """The fields that fix parameter shapes and checkpoint layout."""
        return {"n_classes": self.n_classes, "widths": list(self.widths), "mode": self.mode}

    def config_hash(self):
        blob = json.dumps(self.structure(), sort_keys=True).encode()
        return hashlib.blake2b(blob, digest_size=8).digest()

    def to_dict(self):
        return asdict(self)


@dataclass
class StepLog:
    step: int
    lr_g: float
    lr_d: float = None
    seg: list = field(default_factory=list)
    adv: list = field(default_factory=list)
    d: list = field(default_factory=list)
    ms: float = None

    def row(self, with_timing=True):
        def fmt(v):
            return "" if v is None else repr(float(v))

        def level(vals, i):
            return fmt(vals[i]) if i < len(vals) else ""

        return [str(self.step), fmt(self.lr_g), fmt(self.lr_d),
                level(self.seg, 0), level(self.seg, 1),
                level(self.adv, 0), level(self.adv, 1),
                level(self.d, 0), level(self.d, 1),
                f"{self.ms:.3f}" if (with_timing and self.ms is not None) else ""]


def _value(name, loss):
    v = loss.item()
    if not math.isfinite(v):
        raise NumericalError(f"{name} is not finite ({v})")
    return v


def _term(name, fn, *args):
    try:
        return fn(*args)
    except NumericalError as exc:
        raise NumericalError(f"{name}: {exc}") from exc


def _as_batch(image):
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return Tensor(arr)


class Trainer:
    """Holds G, the discriminators and their optimizers for one run."""

    def __init__(self, config):
        self.config = config
        seeds = np.random.SeedSequence(config.seed).generate_state(4)
        self.G = init_segnet(int(seeds[0]), config.seg_spec())
        d_in = self.G.feature_channels if config.mode == "feature" else config.n_classes
        self.D = [init_discriminator(int(seeds[1]) + i, d_in) for i in range(config.n_discriminators)]
        self.opt_g = SGD(self.trainable_g(), momentum=config.momentum, weight_decay=config.weight_decay)
        self.opt_d = [Adam(d, betas=config.betas) for d in self.D]
        self.sched_g = PolySchedule(config.lr_g, max(config.total_steps, 1), config.power)
        self.sched_d = PolySchedule(config.lr_d, max(config.total_steps, 1), config.power)
        self.order_seeds = (int(seeds[2]), int(seeds[3]))
        self.step_count = 0
        self.disc_loss, self.adv_loss = losses.GAN_LOSSES[config.gan]
        # when set, every backward pass records which parameters of the
        # opposing network received a gradient: (step, phase, names)
        self.audit = None

    # -- helpers ----------------------------------------------------------

    def trainable_g(self):
        """G's parameters reached by the objective; the aux head only trains with two levels."""
        if self.config.levels == 2:
            return self.G
        return Params((k, t) for k, t in self.G.items() if not k.startswith("aux."))

    def _disc_inputs(self, out, h, w):
        if self.config.mode == "feature":
            return [T.upsample_bilinear(out["F2"], h, w)]
        return [out["P1"], out["P2"]][: self.config.levels]

    def _seg_outputs(self, out):
        return [out["P1"], out["P2"]][: self.config.levels]

    def gradient_leaks(self, network):
        """Names of parameters of ``network`` that carry a gradient."""
        return [n for n, t in network.items() if t.grad is not None]

    # -- the step ---------------------------------------------------------

    def g_objective(self, image_s, labels_s, image_t):
        """Forward both domains through G (and frozen Ds); returns (total, seg, adv, preds)."""
        cfg = self.config
        out_s = _term("G forward (source image)", self.G, image_s)
        seg = [_term(f"seg{i + 1}", losses.seg_loss, p, labels_s)
               for i, p in enumerate(self._seg_outputs(out_s))]
        adv = []
        d_in_s = d_in_t = None
        if cfg.mode != "source_only":
            h, w = image_t.shape[2:]
            out_t = _term("G forward (target image)", self.G, image_t)
            d_in_s = self._disc_inputs(out_s, h, w)
            d_in_t = self._disc_inputs(out_t, h, w)
            for i, (d, x) in enumerate(zip(self.D, d_in_t)):
                adv.append(_term(f"adv{i + 1}", lambda d=d, x=x: self.adv_loss(d(x))))
        for i, v in enumerate(seg):
            _value(f"seg{i + 1}", v)
        for i, v in enumerate(adv):
            _value(f"adv{i + 1}", v)
        total = _term("g_total", losses.total_g_loss, seg, adv, cfg.weights)
        return total, seg, adv, (d_in_s, d_in_t)

    def d_objective(self, i, pred_s, pred_t):
        d = self.D[i]
        return _term(f"d{i + 1}", lambda: T.add(self.disc_loss(d(T.detach(pred_s)), losses.SOURCE),
                                               self.disc_loss(d(T.detach(pred_t)), losses.TARGET)))

    def g_update(self, image_s, labels_s, image_t, lr):
        """One SGD step on G with every discriminator frozen."""
        for d in self.D:
            d.set_requires_grad(False)
        self.G.zero_grad()
        total, seg, adv, preds = self.g_objective(image_s, labels_s, image_t)
        seg_vals = [v.item() for v in seg]
        adv_vals = [v.item() for v in adv]
        _value("g_total", total)
        T.backward(total)
        if self.audit is not None:
            self.audit.append((self.step_count, "G", [n for d in self.D for n in self.gradient_leaks(d)]))
        self.opt_g.step(lr)
        self.G.zero_grad()
        return seg_vals, adv_vals, preds

    def d_update(self, i, pred_s, pred_t, lr):
        """One Adam step on D_i from detached source and target predictions."""
        d = self.D[i]
        d.set_requires_grad(True)
        d.zero_grad()
        loss_d = self.d_objective(i, pred_s, pred_t)
        value = _value(f"d{i + 1}", loss_d)
        T.backward(loss_d)
        if self.audit is not None:
            self.audit.append((self.step_count, f"D{i + 1}", self.gradient_leaks(self.G)))
        self.opt_d[i].step(lr)
        d.zero_grad()
        return value

    def train_step(self, sample_s, image_t, t=None):
        """One joint update; ``image_t`` is an unlabeled target image."""
        cfg = self.config
        t = self.step_count if t is None else t
        if t >= cfg.total_steps:
            raise ConfigurationError(f"step {t} is past total_steps={cfg.total_steps}")
        started = time.perf_counter()
        image_s = _as_batch(sample_s.image)
        labels_s = np.asarray(sample_s.labels)[None]
        image_t = _as_batch(image_t) if cfg.mode != "source_only" else None

        lr_g = self.sched_g(t)
        lr_d = self.sched_d(t) if self.D else None
        self.step_count = t
        seg, adv, (d_in_s, d_in_t) = self.g_update(image_s, labels_s, image_t, lr_g)
        entry = StepLog(step=t, lr_g=lr_g, lr_d=lr_d, seg=seg, adv=adv)
        for i in range(len(self.D)):
            entry.d.append(self.d_update(i, d_in_s[i], d_in_t[i], lr_d))

        self.step_count = t + 1
        entry.ms = (time.perf_counter() - started) * 1000.0
        return entry

    # -- persistence ------------------------------------------------------

    def state_records(self):
        rec = OrderedDict()
        rec["meta.step"] = np.array([self.step_count], np.float32)
        for k, v in self.G.snapshot().items():
            rec[f"g.{k}"] = v
        for k, v in self.opt_g.state().items():
            rec[f"opt.g.{k}"] = v
        for i, (d, opt) in enumerate(zip(self.D, self.opt_d), start=1):
            for k, v in d.snapshot().items():
                rec[f"d{i}.{k}"] = v
            for k, v in opt.state().items():
                rec[f"opt.d{i}.{k}"] = v
        return rec

    def load_records(self, rec):
        def section(prefix):
            return OrderedDict((k[len(prefix):], v) for k, v in rec.items() if k.startswith(prefix))

        self.step_count = int(rec["meta.step"][0])
        self.G.load(section("g."))
        self.opt_g.load_state(section("opt.g."))
        for i, (d, opt) in enumerate(zip(self.D, self.opt_d), start=1):
            d.load(section(f"d{i}."))
            opt.load_state(section(f"opt.d{i}."))


# --- checkpoint file ---------------------------------------------------------

CKPT_MAGIC = b"OACK"
CKPT_VERSION = 1


def encode_checkpoint(records, config_hash):
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<B", CKPT_VERSION))
    buf.write(config_hash)
    buf.write(struct.pack("<I", len(records)))
    for name, arr in records.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def decode_checkpoint(data, path="<bytes>"):
    """Returns (config_hash, records)."""
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise TruncatedError(f"{path}: checkpoint truncated at byte {pos}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != CKPT_MAGIC:
        raise MagicError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<B", take(1))
    if version != CKPT_VERSION:
        raise VersionError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    chash = bytes(take(8))
    (count,) = struct.unpack("<I", take(4))
    records = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode()
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
        records[name] = arr
    if pos != len(view):
        raise TruncatedError(f"{path}: {len(view) - pos} trailing bytes after last record")
    return chash, records


def save_checkpoint(path, trainer):
    data = encode_checkpoint(trainer.state_records(), trainer.config.config_hash())
    Path(path).write_bytes(data)
    return data


def load_checkpoint(path, config, force=False):
    """Rebuild a Trainer for ``config`` from a checkpoint file.

    A checkpoint written under a different structural config is refused
    unless ``force`` is set, in which case parameter shapes must still agree.
    """
    chash, records = decode_checkpoint(Path(path).read_bytes(), path)
    if chash != config.config_hash() and not force:
        raise ConfigHashError(
            f"{path}: config hash {chash.hex()} does not match {config.config_hash().hex()}")
    trainer = Trainer(config)
    trainer.load_records(records)
    return trainer


# --- the loop ----------------------------------------------------------------


class _Cycler:
    """Endless pass over ``n`` items, reshuffled each epoch from a seeded stream."""

    def __init__(self, n, seed):
        self.n = n
        self.rng = np.random.default_rng(seed)
        self.order = []

    def __next__(self):
        if not self.order:
            self.order = list(self.rng.permutation(self.n))
        return int(self.order.pop(0))


def write_manifest(path, config):
    import outadapt
    lines = [f"tool_version={outadapt.__version__}"]
    lines += [f"{k}={_fmt_value(v)}" for k, v in config.to_dict().items()]
    Path(path).write_text("\n".join(lines) + "\n")


def _fmt_value(v):
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return "" if v is None else str(v)


def train(config, source=None, target_images=None, out=None, on_step=None):
    """Run ``config.total_steps`` joint steps.

    ``source`` is a list of labeled samples; ``target_images`` a list of
    image arrays only.  Either is loaded from ``config.data`` when omitted.
    ``on_step(entry, trainer)`` is called after every step.
    Returns the trainer and the list of StepLogs.
    """
    from . import synth

    if source is None:
        if not config.data:
            raise ConfigurationError("no source samples and no dataset path given")
        source = synth.load_split(config.data, config.source_split)
    if target_images is None and config.mode != "source_only":
        if not config.data:
            raise ConfigurationError("no target images and no dataset path given")
        target_images = [s.image for s in synth.load_split(config.data, config.target_split,
                                                           with_labels=False)]
    if not source:
        raise ConfigurationError("source split is empty")
    if config.mode != "source_only" and not target_images:
        raise ConfigurationError("target split is empty")

    out = Path(out or config.out) if (out or config.out) else None
    trainer = Trainer(config)
    if out:
        out.mkdir(parents=True, exist_ok=True)
        write_manifest(out / "manifest.txt", config)
    src_order = _Cycler(len(source), trainer.order_seeds[0])
    tgt_order = _Cycler(len(target_images), trainer.order_seeds[1]) if target_images else None

    logs = []
    writer = None
    log_file = None
    if out:
        log_file = open(out / "train_log.csv", "w", newline="")
        writer = csv.writer(log_file, lineterminator="\n")
        writer.writerow(CSV_HEADER)
    try:
        for t in range(config.total_steps):
            s = source[next(src_order)]
            timg = target_images[next(tgt_order)] if tgt_order else None
            entry = trainer.train_step(s, timg, t)
            logs.append(entry)
            if writer:
                writer.writerow(entry.row(config.log_timing))
            if on_step:
                on_step(entry, trainer)
            if out and config.checkpoint_interval and (t + 1) % config.checkpoint_interval == 0:
                save_checkpoint(out / f"ckpt_{t + 1:06d}.oack", trainer)
    finally:
        if log_file:
            log_file.close()
    if out:
        save_checkpoint(out / "final.oack", trainer)
    return trainer, logs
