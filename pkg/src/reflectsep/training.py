"""Adversarial training loop, half-split weak supervision, gradient checks.

Every step builds its batch from ``numpy.random.default_rng([seed, step])``,
so a run is fully determined by its config and can resume from any checkpoint
without replaying earlier batches.
"""
from __future__ import annotations

import dataclasses
import enum
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch

from . import checkpoint, losses, networks, synthesis
from .losses import (LossWeights, discriminator_report_supervised, discriminator_report_weak,
                     loss_supervised, loss_weak, tsv_header, tsv_line)
from .networks import Variant
from .synthesis import ImageSet, SynthModelKind

log = logging.getLogger(__name__)

LOG_NAME = "train_log.tsv"


class Mode(enum.Enum):
    SUPERVISED = "supervised"
    WEAK = "weak"


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term, step):
        super().__init__(f"non-finite loss term {term!r} at step {step}")
        self.term = term
        self.step = step


@dataclass
class TrainConfig:
    variant: Variant = Variant.B3
    mode: Mode = Mode.SUPERVISED
    kinds: frozenset = synthesis.ALL_KINDS
    steps: int = 1000
    batch_size: int = 16
    learning_rate: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    lambda1: float = 100.0
    lambda2: float = 100.0
    seed: int = 0
    checkpoint_every: int = 1000
    t_dir: str = ""
    r_dir: str = ""
    out_dir: str = ""
    image_size: int = 128
    width_div: int = 1
    resume: str = ""

    def __post_init__(self):
        self.variant = Variant.parse(self.variant)
        self.mode = Mode(self.mode.value if isinstance(self.mode, Mode) else str(self.mode).lower())
        self.kinds = SynthModelKind.parse(self.kinds)
        if not self.kinds:
            raise ValueError("kinds must not be empty")
        if self.mode is Mode.SUPERVISED and self.variant is Variant.MASK:
            raise ValueError("supervised mode requires variant b1, b2 or b3")
        if self.mode is Mode.WEAK and self.variant is not Variant.MASK:
            raise ValueError("weak mode requires variant mask")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.checkpoint_every < 1:
            raise ValueError(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")

    @property
    def weights(self):
        return LossWeights(self.lambda1, self.lambda2)


CONFIG_KEYS = tuple(f.name for f in dataclasses.fields(TrainConfig))


def parse_config(text):
    """Parse ``key = value`` lines (``#`` comments) into a :class:`TrainConfig`.

    Unknown keys are errors; omitted keys take the dataclass defaults.
    ``kinds`` is a comma list or ``all``.
    """
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        kind = types[key]
        if kind == "int":
            values[key] = int(value)
        elif kind == "float":
            values[key] = float(value)
        else:
            values[key] = value
    return TrainConfig(**values)


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def format_config(config):
    lines = []
    for f in dataclasses.fields(TrainConfig):
        v = getattr(config, f.name)
        if f.name == "kinds":
            v = ",".join(k.value for k in synthesis.sorted_kinds(v))
        elif isinstance(v, enum.Enum):
            v = v.value
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def split_halves(files, seed=0):
    """Split into two disjoint halves via a seeded shuffle of the sorted list.

    Even positions of the shuffled order go to the first half, odd positions to
    the second, so an odd count gives the first half one extra item. The first
    half synthesizes observations, the second supplies real discriminator samples.
    """
    files = sorted(files)
    if len(files) < 2:
        raise ValueError(f"need at least 2 files to split, got {len(files)}")
    order = np.random.default_rng(seed).permutation(len(files))
    shuffled = [files[i] for i in order]
    return shuffled[0::2], shuffled[1::2]


class SupervisedBatch(NamedTuple):
    y: torch.Tensor
    t: torch.Tensor
    r: torch.Tensor


class WeakBatch(NamedTuple):
    y: torch.Tensor
    t_pool: torch.Tensor
    r_pool: torch.Tensor


@dataclass
class Sources:
    """Image sources for one run. In weak mode ``t``/``r`` synthesize
    observations and ``t_real``/``r_real`` feed the discriminators."""

    t: ImageSet
    r: ImageSet
    t_real: ImageSet | None = None
    r_real: ImageSet | None = None


def make_sources(config, t_source=None, r_source=None):
    t_source = t_source if t_source is not None else ImageSet.from_dir(config.t_dir)
    r_source = r_source if r_source is not None else ImageSet.from_dir(config.r_dir)
    if config.mode is Mode.SUPERVISED:
        return Sources(t_source, r_source)
    halves = []
    for src in (t_source, r_source):
        index = {name: i for i, name in enumerate(src.names)}
        a, b = split_halves(src.names, config.seed)
        halves.append((src.subset(index[n] for n in a), src.subset(index[n] for n in b)))
    (ta, tb), (ra, rb) = halves
    return Sources(ta, ra, tb, rb)


def batch_rng(seed, step):
    return np.random.default_rng([int(seed), int(step)])


def make_batch(config, sources, step, dtype=torch.float32):
    rng = batch_rng(config.seed, step)
    pairs = synthesis.build_batch(sources.t, sources.r, config.kinds, config.batch_size, rng,
                                  out_size=config.image_size)
    y, t, r = synthesis.stack_pairs(pairs)
    to = lambda a: networks.images_to_tensor(a, dtype)  # noqa: E731
    if config.mode is Mode.SUPERVISED:
        return SupervisedBatch(to(y), to(t), to(r))
    # Paired t, r are dropped here: weak training never sees them.
    pools = []
    for src in (sources.t_real, sources.r_real):
        imgs = [synthesis.augment(src[int(rng.integers(len(src)))], rng, config.image_size)
                for _ in range(config.batch_size)]
        pools.append(to(np.stack(imgs)))
    return WeakBatch(to(y), *pools)


def _adam(params, spec):
    return torch.optim.Adam(params, lr=spec["lr"], betas=tuple(spec["betas"]), foreach=False)


def make_optimizers(model, specs):
    """``d`` for discriminators, ``g`` for the generator (minus mask-private layers), ``m`` for those."""
    opts = {"d": _adam(model.discriminator_parameters(), specs["d"]),
            "g": _adam(model.main_generator_parameters(), specs["g"])}
    if model.variant is Variant.MASK:
        opts["m"] = _adam(model.mask_parameters(), specs["m"])
    return opts


def _opt_specs(config):
    spec = {"lr": config.learning_rate, "betas": [config.beta1, config.beta2]}
    return {"d": spec, "g": spec, "m": spec}


@dataclass
class TrainState:
    model: networks.SeparatorModel
    optimizers: dict
    step: int = 0
    rng: np.random.Generator = field(default_factory=np.random.default_rng)

    def moment_buffers(self):
        return {k: o.state for k, o in self.optimizers.items()}


def init_state(config, dtype=torch.float32):
    rng = np.random.default_rng(config.seed)
    model = networks.init_model(config.variant, rng, config.width_div, config.image_size,
                                dtype=dtype)
    return TrainState(model, make_optimizers(model, _opt_specs(config)), 0, rng)


def _check_finite(report, step):
    bad = report.first_non_finite()
    if bad is not None:
        raise NonFiniteLossError(bad, step)


def generator_optimizer(state):
    """MASK alternates by step parity: even steps train the main branches, odd the mask."""
    if state.model.variant is Variant.MASK and state.step % 2 == 1:
        return state.optimizers["m"]
    return state.optimizers["g"]


def train_step(state, config, batch):
    """One discriminator update (both D_t and D_r) followed by one generator update."""
    m = state.model
    m.train()
    outputs, _ = networks.forward(m, batch.y)
    if isinstance(batch, SupervisedBatch):
        d_report = discriminator_report_supervised(m, batch.y, batch.t, batch.r,
                                                   outputs["t_hat"], outputs["r_hat"])
    else:
        d_report = discriminator_report_weak(m, batch.t_pool, batch.r_pool,
                                             outputs["t_hat"], outputs["r_hat"])
    _check_finite(d_report, state.step)
    opt_d = state.optimizers["d"]
    opt_d.zero_grad(set_to_none=True)
    d_report.total.backward()
    opt_d.step()

    if isinstance(batch, SupervisedBatch):
        report = loss_supervised(m, tuple(batch), config.weights, outputs=outputs,
                                 with_discriminator=False)
    else:
        report = loss_weak(m, batch.y, batch.t_pool, batch.r_pool, config.weights,
                           outputs=outputs, with_discriminator=False)
    report.discriminator = d_report
    _check_finite(report, state.step)
    opt_g = generator_optimizer(state)
    for name, opt in state.optimizers.items():
        if name != "d":
            opt.zero_grad(set_to_none=True)
    report.total.backward()
    opt_g.step()
    state.step += 1
    return state, report


def checkpoint_path(out_dir, step):
    return Path(out_dir) / f"ckpt_{step:06d}.rsc"


def save_checkpoint(state, path):
    return checkpoint.save(path, state.model, state.optimizers, state.step, state.rng)


def load_checkpoint(path):
    model, optimizers, step, rng = checkpoint.load(path, make_optimizers)
    return TrainState(model, optimizers, step, rng)


def fit(config, t_source=None, r_source=None, on_step=None):
    """Run training up to ``config.steps`` total steps.

    With ``out_dir`` set, appends one TSV line per step to ``train_log.tsv`` and
    writes ``ckpt_NNNNNN.rsc`` every ``checkpoint_every`` steps and at the final
    step (once, if those coincide). ``resume`` continues from a checkpoint.
    """
    sources = make_sources(config, t_source, r_source)
    if config.resume:
        state = load_checkpoint(config.resume)
        if state.model.variant is not config.variant:
            raise ValueError(f"checkpoint variant {state.model.variant.value} does not match "
                             f"config variant {config.variant.value}")
        if state.model.image_size != config.image_size or state.model.width_div != config.width_div:
            raise ValueError("checkpoint model size does not match config")
    else:
        state = init_state(config)
    out_dir = Path(config.out_dir) if config.out_dir else None
    log_fh = None
    if out_dir is not None:
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
            log_path = out_dir / LOG_NAME
            fresh = not log_path.exists() or not config.resume
            log_fh = open(log_path, "w" if fresh else "a")
        except OSError as exc:
            raise OSError(f"cannot prepare output directory {out_dir}: {exc}") from exc
    try:
        header_written = bool(config.resume) and log_fh is not None and not fresh
        while state.step < config.steps:
            step = state.step
            batch = make_batch(config, sources, step)
            state, report = train_step(state, config, batch)
            if on_step is not None:
                on_step(step, report)
            if log_fh is not None:
                if not header_written:
                    log_fh.write(tsv_header(report) + "\n")
                    header_written = True
                log_fh.write(tsv_line(step, report) + "\n")
                log_fh.flush()
            if out_dir is not None and (state.step % config.checkpoint_every == 0
                                        or state.step == config.steps):
                save_checkpoint(state, checkpoint_path(out_dir, state.step))
            log.debug("step %d total %.5f", step, report.values()["total"])
    finally:
        if log_fh is not None:
            log_fh.close()
    return state


# --- gradient checks -------------------------------------------------------

GRADCHECK_WIDTH_DIV = 8
GRADCHECK_SIZE = 32
LOSS_KINDS = ("full", "adv_g", "adv_d", "pixel", "content")


@dataclass
class GradCheckReport:
    variant: Variant
    loss_kind: str
    max_rel_err: float
    rel_tol: float
    n_coords: int
    errors: list
    skipped: int = 0

    @property
    def passed(self):
        return self.max_rel_err < self.rel_tol


def _reduced_problem(variant, seed, batch_size=2):
    rng = np.random.default_rng(seed)
    m = networks.init_model(variant, rng, GRADCHECK_WIDTH_DIV, GRADCHECK_SIZE, dtype=torch.float64)
    # Wider weights than the N(0, 0.02) init keep activations and gradients well above roundoff.
    with torch.no_grad():
        for name, p in m.named_parameters():
            if p.ndim > 1:
                p.copy_(torch.from_numpy(rng.normal(0.0, 0.2, size=tuple(p.shape))))
    m.train()
    shape = (batch_size, GRADCHECK_SIZE, GRADCHECK_SIZE, 3)
    t = rng.uniform(size=shape)
    r = rng.uniform(size=shape)
    y = 0.6 * t + 0.4 * r
    to = lambda a: networks.images_to_tensor(a, torch.float64)  # noqa: E731
    return m, to(y), to(t), to(r), rng


def _loss_fn(m, loss_kind, y, t, r, features):
    weights = LossWeights()
    supervised = m.variant is not Variant.MASK

    def generator_report():
        if supervised:
            return loss_supervised(m, (y, t, r), weights, features=features,
                                   with_discriminator=False)
        return loss_weak(m, y, t, r, weights, features=features, with_discriminator=False)

    if loss_kind == "full":
        return lambda: generator_report().total
    if loss_kind == "adv_g":
        return lambda: sum(v for k, v in generator_report().terms.items() if k.startswith("adv_"))
    if loss_kind == "pixel":
        return lambda: sum(v for k, v in generator_report().terms.items()
                           if k.startswith(("l1_", "l2_")))
    if loss_kind == "content":
        if m.variant not in (Variant.B3, Variant.MASK):
            raise ValueError("content loss check needs variant b3 or mask")
        return lambda: sum(v for k, v in generator_report().terms.items()
                           if k in ("content", "feat_mt", "feat_mr"))
    if loss_kind == "adv_d":
        def d_loss():
            out, _ = networks.forward(m, y)
            if supervised:
                return discriminator_report_supervised(m, y, t, r, out["t_hat"], out["r_hat"]).total
            return discriminator_report_weak(m, t, r, out["t_hat"], out["r_hat"]).total
        return d_loss
    raise ValueError(f"unknown loss kind {loss_kind!r}; valid: {', '.join(LOSS_KINDS)}")


# Five-point central difference, error O(step^4): offsets -> weights.
STENCIL = {-2: 1 / 12, -1: -8 / 12, 1: 8 / 12, 2: -1 / 12}

# Differencing a loss of size ~10-100 in double precision leaves ~1e-10 of
# absolute noise, so gradients below this floor are compared in absolute terms.
GRAD_FLOOR = 1e-6


def relative_error(a, b, floor=GRAD_FLOOR):
    return abs(a - b) / max(abs(a), abs(b), floor)


class _KinkRecorder:
    """Records which side of every kink each element sits on during a call.

    Kinks are ReLU/leaky-ReLU pre-activations plus the loss-side points reported
    through ``losses.KINK_OBSERVERS``. A finite-difference stencil whose
    endpoints see a different pattern than the base point straddles a kink,
    where central differences are meaningless.
    """

    def __init__(self, model):
        self.pattern = []
        self.handles = []
        losses.KINK_OBSERVERS.append(self.observe)
        for mod in model.modules():
            if isinstance(mod, networks.Block) and mod.spec.activation in (
                    networks.Activation.RELU, networks.Activation.LRELU):
                target = mod.bn if mod.bn is not None else mod.conv
                self.handles.append(target.register_forward_hook(self._record))

    def _record(self, module, inputs, output):
        self.pattern.append(output.detach() > 0)

    def observe(self, mask):
        self.pattern.append(mask)

    def run(self, fn):
        self.pattern = []
        value = fn().item()
        return value, self.pattern

    def close(self):
        for h in self.handles:
            h.remove()
        losses.KINK_OBSERVERS.remove(self.observe)


def _same_pattern(a, b):
    return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))


def grad_check(variant, loss_kind="full", rel_tol=1e-3, n_coords=64, seed=0, step=1e-4):
    """Compare analytic gradients with five-point central differences on a reduced model.

    The model has every channel count divided by 8, 32x32 inputs and float64
    weights. Parameter coordinates are visited in a seeded random order over
    the parameters the loss trains (discriminators for ``adv_d``, generator
    otherwise). A coordinate is skipped when its stencil (offsets up to
    2 * ``step``) crosses a kink, meaning a ReLU sign, an L1 sign or a clamp
    boundary changes; checking stops after ``n_coords`` usable coordinates.
    Relative error is ``|a - n| / max(|a|, |n|, GRAD_FLOOR)``.
    """
    variant = Variant.parse(variant)
    m, y, t, r, rng = _reduced_problem(variant, seed)
    features = networks.frozen_encoder(m)
    fn = _loss_fn(m, loss_kind, y, t, r, features)
    params = m.discriminator_parameters() if loss_kind == "adv_d" else m.generator_parameters()

    for p in m.parameters():
        p.grad = None
    fn().backward()
    grads = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
             for p in params]

    sizes = np.array([p.numel() for p in params])
    bounds = np.cumsum(sizes)
    order = rng.permutation(int(sizes.sum()))
    recorder = _KinkRecorder(m)
    errors = []
    skipped = 0
    try:
        with torch.no_grad():
            _, base = recorder.run(fn)
            for f in order:
                if len(errors) >= n_coords:
                    break
                pi = int(np.searchsorted(bounds, f, side="right"))
                j = int(f - (bounds[pi - 1] if pi else 0))
                view = params[pi].view(-1)
                orig = view[j].item()
                values, smooth = {}, True
                for k in STENCIL:
                    view[j] = orig + k * step
                    values[k], pattern = recorder.run(fn)
                    smooth = smooth and _same_pattern(base, pattern)
                view[j] = orig
                if not smooth:
                    skipped += 1
                    continue
                numeric = sum(STENCIL[k] * values[k] for k in STENCIL) / step
                analytic = grads[pi].view(-1)[j].item()
                errors.append((pi, j, analytic, numeric, relative_error(analytic, numeric)))
    finally:
        recorder.close()
    worst = max(e[4] for e in errors) if errors else 0.0
    return GradCheckReport(variant, loss_kind, worst, rel_tol, len(errors), errors, skipped)
