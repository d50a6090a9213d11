"""Alternating adversarial training loop with Adam, deterministic
checkpointing, per-step loss logging, and periodic sample grids.

Checkpoint file layout (little-endian):

    magic "GCKP" | u16 version=1 | u64 step | u32 epoch
    | 32-byte sha256 fingerprint of the canonical config JSON
    | u32 config length | config JSON (utf-8)
    | u64 rng seed | u64 rng counter
    | tensor table (parameters) | tensor table (first moments)
    | tensor table (second moments)
    | u32 CRC32 of all preceding bytes

    tensor table := u32 count
                    | count x { u16 name length | name utf-8 | u8 rank
                                | rank x u32 dims | float32 elements }

Parameter names carry a "g." or "d." network prefix. Batchnorm running
statistics ride in the parameter table as non-trainable entries (their
moment slots are zero); the optimizer never touches them.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
import os
import struct
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ndgrad
from .discriminator import Discriminator, DiscriminatorConfig
from .generator import ConfigError, Generator, GeneratorConfig
from .glyphdata import (
    ChecksumError,
    FormatError,
    ValidationError,
    as_view,
    batch_iter,
    denormalize,
    stack_batch,
    write_pgm,
)
from .ndgrad import RngState, ShapeError, derive_seed
from .objectives import (
    DivergenceError,
    LossReport,
    LossWeights,
    cheat_loss,
    constant_loss,
    discriminator_objective,
    generator_objective,
    l1_loss,
    tv_loss,
)

CHECKPOINT_MAGIC = b"GCKP"
CHECKPOINT_VERSION = 1

LOG_FIELDS = ("step", "epoch", "l1", "constant", "cheat", "tv", "g_total", "d_total")

# stream tags so the init, shuffle and dropout RNGs never collide
_SEED_GEN, _SEED_DISC, _SEED_DROPOUT, _SEED_EPOCH = 0x67, 0x64, 0x72, 0xE7


class IncompatibilityError(ValueError):
    """Checkpoint does not match the configuration it is loaded against."""


@dataclass
class TrainConfig:
    side: int = 32
    g_depth: int = 5
    g_base_channels: int = 16
    g_channel_cap: int = 128
    d_levels: int = 2
    d_base_channels: int = 16
    weights: LossWeights = field(default_factory=LossWeights)
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 8
    epochs: int = 1
    seed: int = 0
    checkpoint_interval: int = 100
    sample_interval: int = 100
    deterministic: bool = True
    norm: bool = True
    downsample: str = "strided_conv"
    dropout_p: float = 0.5
    dropout_levels: int = 3
    const_source: str = "target"
    const_batch_reduce: str = "mean"
    sample_count: int = 8

    def validate(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not (0.0 <= v < 1.0):
                raise ConfigError(f"{name} must lie in [0,1), got {v}")
        if self.adam_eps <= 0:
            raise ConfigError(f"adam_eps must be > 0, got {self.adam_eps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.checkpoint_interval < 1 or self.sample_interval < 1:
            raise ConfigError("checkpoint_interval and sample_interval must be >= 1")
        if self.const_source not in ("target", "source"):
            raise ConfigError(f"const_source must be target or source, got {self.const_source!r}")
        if self.const_batch_reduce not in ("mean", "sum"):
            raise ConfigError(
                f"const_batch_reduce must be mean or sum, got {self.const_batch_reduce!r}"
            )
        self.weights.validate()
        self.generator_config().validate()
        self.discriminator_config().validate()

    def generator_config(self):
        return GeneratorConfig(
            side=self.side,
            depth=self.g_depth,
            base_channels=self.g_base_channels,
            channel_cap=self.g_channel_cap,
            init_seed=derive_seed(self.seed, _SEED_GEN),
            norm=self.norm,
            downsample=self.downsample,
            dropout_p=self.dropout_p,
            dropout_levels=self.dropout_levels,
        )

    def discriminator_config(self):
        return DiscriminatorConfig(
            side=self.side,
            levels=self.d_levels,
            base_channels=self.d_base_channels,
            init_seed=derive_seed(self.seed, _SEED_DISC),
            norm=self.norm,
        )

    def to_dict(self):
        d = asdict(self)
        d["weights"] = self.weights.as_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        d = dict(d)
        if "weights" in d:
            w = d["weights"]
            wkeys = sorted(set(w) - {"l1", "const", "cheat", "tv"})
            if wkeys:
                raise ConfigError(f"unknown weight keys: {', '.join(wkeys)}")
            d["weights"] = LossWeights(**w)
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def canonical_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def fingerprint(self):
        return hashlib.sha256(self.canonical_json().encode("ascii")).digest()


@dataclass
class TrainerState:
    config: TrainConfig
    generator: Generator
    discriminator: Discriminator
    g_moments: dict
    d_moments: dict
    rng: RngState
    step: int = 0
    epoch: int = 0

    @classmethod
    def from_config(cls, config):
        gen = Generator(config.generator_config())
        disc = Discriminator(config.discriminator_config())
        return cls(
            config=config,
            generator=gen,
            discriminator=disc,
            g_moments=_zero_moments(gen.params),
            d_moments=_zero_moments(disc.params),
            rng=RngState(derive_seed(config.seed, _SEED_DROPOUT)),
        )


def _zero_moments(store):
    return {n: [np.zeros_like(t.data), np.zeros_like(t.data)] for n, t in store.items()}


def adam_step(params, grads, moments, t, lr, beta1, beta2, eps):
    """Bias-corrected Adam update, elementwise and in place.

    params maps name -> array; grads may omit entries (treated as zero, so
    the moments still decay). Moment arrays are mutated in place.
    """
    if t < 1:
        raise ndgrad.ParameterError(f"adam step index must be >= 1, got {t}")
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: grad shape {g.shape} != param shape {p.shape} for {name}")
        m, v = moments[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def _step_network(store, moments, t, config):
    params = {n: tsr.data for n, tsr in store.trainable_items()}
    grads = {n: tsr.grad for n, tsr in store.trainable_items() if tsr.grad is not None}
    adam_step(params, grads, moments, t, config.lr, config.beta1, config.beta2, config.adam_eps)


def discriminator_phase(state, src, tgt, t):
    """Score real and frozen-fake pairs, step the discriminator.

    Fakes are generated without gradient recording, so no gradient can
    reach the generator's weights from this phase.
    """
    gen, disc = state.generator, state.discriminator
    gen.params.zero_grad()
    disc.params.zero_grad()
    with ndgrad.no_grad():
        fake_frozen, _ = gen.generate(src, "train", state.rng)
    real_scores = disc.discriminate(src, tgt, "train")
    fake_scores = disc.discriminate(src, fake_frozen, "train")
    d_total, d_frag = discriminator_objective(real_scores, fake_scores)
    ndgrad.backward(d_total)
    _step_network(disc.params, state.d_moments, t, state.config)
    return d_frag


def generator_phase(state, src, tgt, t):
    """Regenerate with gradients, assemble the composite loss, step the
    generator. The discriminator accumulates gradients here but is never
    stepped; its parameters come out bit-identical."""
    cfg = state.config
    gen, disc = state.generator, state.discriminator
    gen.params.zero_grad()
    disc.params.zero_grad()
    fake, fb = gen.generate(src, "train", state.rng)
    real_for_const = tgt if cfg.const_source == "target" else src
    fa, _ = gen.encode(real_for_const, "train")
    g_scores = disc.discriminate(src, fake, "train")
    parts = {
        "l1": l1_loss(tgt, fake),
        "constant": constant_loss(fa, fb, cfg.const_batch_reduce),
        "cheat": cheat_loss(g_scores, 1.0),
        "tv": tv_loss(fake),
    }
    g_total, g_frag = generator_objective(parts, cfg.weights)
    ndgrad.backward(g_total)
    _step_network(gen.params, state.g_moments, t, cfg)
    return g_frag


def train_step(state, batch):
    """One alternating update: discriminator phase, then generator phase."""
    src, tgt = stack_batch(batch)
    t = state.step + 1
    d_frag = discriminator_phase(state, src, tgt, t)
    g_frag = generator_phase(state, src, tgt, t)
    state.step = t
    return LossReport(
        l1=g_frag["l1"],
        constant=g_frag["constant"],
        cheat=g_frag["cheat"],
        tv=g_frag["tv"],
        g_total=g_frag["g_total"],
        d_real=d_frag["d_real"],
        d_fake=d_frag["d_fake"],
        d_total=d_frag["d_total"],
        step=t,
        batch_size=len(batch),
    )


def format_log_line(report, epoch):
    vals = [
        report.l1,
        report.constant,
        report.cheat,
        report.tv,
        report.g_total,
        report.d_total,
    ]
    return f"{report.step}\t{epoch}\t" + "\t".join(f"{v:.10g}" for v in vals)


def parse_log(path):
    """Read a training log back into a list of field dicts."""
    rows = []
    with open(path) as fh:
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            if len(parts) != len(LOG_FIELDS):
                continue
            row = {"step": int(parts[0]), "epoch": int(parts[1])}
            for name, raw in zip(LOG_FIELDS[2:], parts[2:]):
                row[name] = float(raw)
            rows.append(row)
    return rows


@dataclass
class TrainResult:
    final_checkpoint: str
    log_path: str
    checkpoints: list
    grids: list
    reports: list


def checkpoint_name(step):
    return f"checkpoint_step{step:07d}.gckp"


def train(config, pack, out_dir, state=None, report_cb=None):
    """Run the full optimization loop over a pack.

    Fresh runs write a checkpoint of the untouched initialization before
    step 1. Passing a loaded state resumes from state.step; the batch
    schedule is a pure function of (seed, epoch), so resumed steps see
    exactly the batches the uninterrupted run would have.

    On divergence the current state is checkpointed and the offending
    report fragment written next to it before the error propagates.
    """
    view = as_view(pack)
    if len(view) == 0:
        raise ValidationError("cannot train on an empty pack")
    os.makedirs(out_dir, exist_ok=True)
    if config.deterministic or ndgrad.deterministic_from_env():
        ndgrad.set_deterministic(True)

    fresh = state is None
    if fresh:
        state = TrainerState.from_config(config)

    spe = math.ceil(len(view) / config.batch_size)
    total = config.epochs * spe
    checkpoints = []
    grids = []
    reports = []

    sample_pairs = [view.sample(i) for i in range(min(config.sample_count, len(view)))]
    log_path = os.path.join(out_dir, "training_log.tsv")

    def save(step):
        path = os.path.join(out_dir, checkpoint_name(step))
        save_checkpoint(state, path)
        checkpoints.append(path)
        return path

    if fresh:
        save(0)

    epoch_iter = None
    epoch_of_iter = -1
    with open(log_path, "a") as log:
        for step in range(state.step + 1, total + 1):
            epoch_idx = (step - 1) // spe
            offset = (step - 1) % spe
            if epoch_iter is None or epoch_idx != epoch_of_iter:
                epoch_iter = batch_iter(
                    view, config.batch_size, derive_seed(config.seed, _SEED_EPOCH, epoch_idx)
                )
                epoch_of_iter = epoch_idx
                if offset:
                    epoch_iter = itertools.islice(epoch_iter, offset, None)
            batch = next(epoch_iter)
            state.epoch = epoch_idx
            try:
                report = train_step(state, batch)
            except DivergenceError as err:
                state.step = step
                path = save(step)
                frag_path = path + ".divergence.json"
                with open(frag_path, "w") as fh:
                    json.dump(err.fragment, fh, indent=2, sort_keys=True)
                raise
            reports.append(report)
            log.write(format_log_line(report, epoch_idx) + "\n")
            if report_cb is not None:
                report_cb(report)
            if step % config.checkpoint_interval == 0:
                save(step)
            if step % config.sample_interval == 0:
                grid_path = os.path.join(out_dir, f"samples_step{step:07d}.pgm")
                emit_samples(state, sample_pairs, grid_path)
                grids.append(grid_path)

    if not checkpoints or checkpoints[-1] != os.path.join(out_dir, checkpoint_name(state.step)):
        save(state.step)
    return TrainResult(checkpoints[-1], log_path, checkpoints, grids, reports)


def emit_samples(state, pairs, path, separator=2):
    """Write a [source | generated | target] PGM grid, one row per pair.

    Generation runs in eval mode, so the same checkpoint always produces
    identical bytes.
    """
    if not pairs:
        raise ndgrad.ParameterError("emit_samples requires at least one pair")
    src, tgt = stack_batch(pairs)
    with ndgrad.no_grad():
        out, _ = state.generator.generate(src, "eval")
    s = state.config.side
    rows = len(pairs)
    height = rows * s + (rows - 1) * separator
    width = 3 * s + 2 * separator
    canvas = np.full((height, width), 128, dtype=np.uint8)
    for i in range(rows):
        r0 = i * (s + separator)
        tiles = (src.data[i, 0], out.data[i, 0], tgt.data[i, 0])
        for j, tile in enumerate(tiles):
            c0 = j * (s + separator)
            canvas[r0 : r0 + s, c0 : c0 + s] = denormalize(tile)
    write_pgm(path, canvas)
    return path


# -- checkpoint serialization ----------------------------------------------


def _pack_table(entries):
    out = [struct.pack("<I", len(entries))]
    for name, arr in entries:
        nb = name.encode("utf-8")
        out.append(struct.pack("<H", len(nb)))
        out.append(nb)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise FormatError("checkpoint ends mid-record", offset=self.pos)
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _unpack_table(reader):
    (count,) = reader.unpack("<I")
    entries = {}
    for _ in range(count):
        (nlen,) = reader.unpack("<H")
        name = reader.take(nlen).decode("utf-8")
        (rank,) = reader.unpack("<B")
        dims = reader.unpack(f"<{rank}I")
        n_elem = int(np.prod(dims)) if rank else 1
        raw = reader.take(4 * n_elem)
        entries[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    return entries


def _named_entries(state):
    entries = []
    for n, t in state.generator.params.items():
        entries.append(("g." + n, t.data))
    for n, t in state.discriminator.params.items():
        entries.append(("d." + n, t.data))
    return entries


def _named_moments(state, which):
    entries = []
    for n, mv in state.g_moments.items():
        entries.append(("g." + n, mv[which]))
    for n, mv in state.d_moments.items():
        entries.append(("d." + n, mv[which]))
    return entries


def save_checkpoint(state, path):
    """Serialize parameters, moments, step/epoch, RNG, and config."""
    cfg_json = state.config.canonical_json().encode("ascii")
    head = (
        CHECKPOINT_MAGIC
        + struct.pack("<HQI", CHECKPOINT_VERSION, state.step, state.epoch)
        + state.config.fingerprint()
        + struct.pack("<I", len(cfg_json))
        + cfg_json
        + struct.pack("<QQ", state.rng.seed & ((1 << 64) - 1), state.rng.counter & ((1 << 64) - 1))
    )
    body = (
        _pack_table(_named_entries(state))
        + _pack_table(_named_moments(state, 0))
        + _pack_table(_named_moments(state, 1))
    )
    blob = head + body
    blob += struct.pack("<I", zlib.crc32(blob) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(blob)
    return path


def _diff_config_fields(stored, given):
    keys = sorted(set(stored) | set(given))
    return [k for k in keys if stored.get(k) != given.get(k)]


def load_checkpoint(path, config=None):
    """Rebuild a TrainerState from a checkpoint file.

    When a config is supplied its fingerprint must match the stored one;
    a mismatch raises IncompatibilityError naming the differing fields.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8 or blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic in {path}", offset=0)
    crc_stored = struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != crc_stored:
        raise ChecksumError(f"checkpoint CRC mismatch in {path} (truncated or corrupt)")
    reader = _Reader(blob[4:-4])
    version, step, epoch = reader.unpack("<HQI")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    fingerprint = reader.take(32)
    (cfg_len,) = reader.unpack("<I")
    cfg_dict = json.loads(reader.take(cfg_len).decode("ascii"))
    stored_config = TrainConfig.from_dict(cfg_dict)
    if stored_config.fingerprint() != fingerprint:
        raise ChecksumError(f"checkpoint fingerprint does not match its stored config in {path}")
    if config is not None and config.fingerprint() != fingerprint:
        fields = _diff_config_fields(stored_config.to_dict(), config.to_dict())
        raise IncompatibilityError(
            f"checkpoint config differs from the supplied config in: {', '.join(fields)}"
        )
    rng_seed, rng_counter = reader.unpack("<QQ")
    tables = [_unpack_table(reader), _unpack_table(reader), _unpack_table(reader)]
    if reader.pos != len(reader.blob):
        raise FormatError(f"{len(reader.blob) - reader.pos} trailing bytes in checkpoint")

    state = TrainerState.from_config(stored_config)
    state.step = step
    state.epoch = epoch
    state.rng = RngState(rng_seed, rng_counter)
    stores = {"g": state.generator.params, "d": state.discriminator.params}
    moments = {"g": state.g_moments, "d": state.d_moments}
    expected = {name for name, _ in _named_entries(state)}
    if expected != set(tables[0]):
        missing = sorted(expected ^ set(tables[0]))
        raise IncompatibilityError(f"checkpoint parameter names differ: {', '.join(missing[:8])}")
    for full_name, arr in tables[0].items():
        prefix, name = full_name.split(".", 1)
        t = stores[prefix][name]
        if t.data.shape != arr.shape:
            raise IncompatibilityError(
                f"checkpoint tensor {full_name} has shape {arr.shape}, expected {t.data.shape}"
            )
        t.data[...] = arr
    for which in (0, 1):
        for full_name, arr in tables[which + 1].items():
            prefix, name = full_name.split(".", 1)
            moments[prefix][name][which][...] = arr
    return state
