"""Alternating adversarial training, checkpointing and resumption.

Each iteration draws one (source, target) pair, updates the discriminator
once on (target, G(source)), then updates the generator once on the
flag-masked sum of adversarial, L1 and style losses.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import yaml

from . import imagecore
from .archive import file_sha256, load_archive, save_archive
from .discriminator import DiscriminatorSpec, build_discriminator
from .discriminator import check_input as check_disc_input
from .errors import (
    ArchiveError,
    ConfigError,
    ConfigMismatchError,
    ExtractorError,
    IntegrityError,
    SamplingError,
    TrainingDivergedError,
)
from .extractor import load_extractor
from .generator import GeneratorSpec, build_generator
from .losses import (
    LossReport,
    LossWeights,
    StyleLayerSet,
    discriminator_loss,
    generator_adv_loss,
    is_finite,
    l1_loss,
    style_loss,
    total_generator_loss,
)
from .sampler import sample_batch

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
LOG_NAME = "train_log.tsv"
LATEST_NAME = "latest"
# fields that may change between a run and its resumption
RESUME_MUTABLE = frozenset({"output_dir", "checkpoint_every", "log_every", "history_tail", "keep_checkpoints", "device"})


@dataclass
class TrainingConfig:
    exemplar: str = ""
    output_dir: str = "runs/default"
    k: int = 128
    total_iterations: int = 100_000
    lr_initial: float = 2e-4
    lr_constant_until: int = 50_000
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 1
    lambda1: float = 100.0
    lambda2: float = 1.0
    enable_adv: bool = True
    enable_l1: bool = True
    enable_style: bool = True
    disc_layers: int = 6
    disc_base_channels: int = 64
    disc_channel_cap: int = 512
    gen_base_channels: int = 64
    gen_resblocks: int = 6
    padding: str = "reflect"
    extractor: str = ""
    extractor_sha256: str = ""
    seed: int = 0
    deterministic: bool = False
    augment: bool = False
    checkpoint_every: int = 5000
    keep_checkpoints: int = 2
    log_every: int = 100
    history_tail: int = 1000
    device: str = "cpu"

    def __post_init__(self):
        if self.k < 16 or self.k % 4:
            raise ConfigError(f"k must be >= 16 and divisible by 4, got {self.k}")
        if self.total_iterations < 0:
            raise ConfigError("total_iterations must be >= 0")
        if not 0 <= self.lr_constant_until <= self.total_iterations:
            raise ConfigError(
                f"lr_constant_until ({self.lr_constant_until}) must lie in [0, total_iterations={self.total_iterations}]"
            )
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not (self.enable_adv or self.enable_l1 or self.enable_style):
            raise ConfigError("at least one loss term must be enabled")
        if self.log_every < 1 or self.checkpoint_every < 0 or self.keep_checkpoints < 1:
            raise ConfigError("log_every and keep_checkpoints must be >= 1, checkpoint_every >= 0")

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.enable_adv, self.enable_l1, self.enable_style)

    @property
    def generator_spec(self) -> GeneratorSpec:
        return GeneratorSpec(base_channels=self.gen_base_channels, num_resblocks=self.gen_resblocks, padding=self.padding)

    @property
    def discriminator_spec(self) -> DiscriminatorSpec:
        return DiscriminatorSpec(
            num_conv_layers=self.disc_layers,
            base_channels=self.disc_base_channels,
            channel_cap=self.disc_channel_cap,
        )

    def replace(self, **changes) -> "TrainingConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return asdict(self)


_COERCE = {"int": int, "float": float, "str": str}


def _coerce(name, kind, value):
    if kind == "bool":
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "yes", "no", "1", "0"):
            return value.lower() in ("true", "yes", "1")
        raise ConfigError(f"{name}: expected a boolean, got {value!r}")
    try:
        if kind == "int" and isinstance(value, float) and not value.is_integer():
            raise ValueError
        return _COERCE[kind](value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: expected {kind}, got {value!r}") from None


def config_from_dict(data: dict) -> TrainingConfig:
    kinds = {f.name: f.type for f in dataclasses.fields(TrainingConfig)}
    unknown = sorted(set(data) - set(kinds))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    values = {k: _coerce(k, kinds[k], "" if v is None and kinds[k] == "str" else v) for k, v in data.items()}
    return TrainingConfig(**values)


def load_config(path) -> TrainingConfig:
    """Read a flat YAML mapping of TrainingConfig fields."""
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict) or any(isinstance(v, (dict, list)) for v in data.values()):
        raise ConfigError(f"config {path} must be a flat key: value mapping")
    return config_from_dict(data)


def save_config(config: TrainingConfig, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(config.to_dict(), fh, sort_keys=False)


# loss-term switches (enable_adv, enable_l1, enable_style) of the ablation grid
ABLATION_GRID = {
    "no_adv": (False, True, True),
    "adv": (True, False, False),
    "adv_l1": (True, True, False),
    "adv_style": (True, False, True),
    "full": (True, True, True),
}


def ablation_configs(config: "TrainingConfig") -> dict:
    """One config per ablation column, each writing to its own subdirectory."""
    return {
        name: config.replace(
            enable_adv=adv, enable_l1=l1, enable_style=style, output_dir=os.path.join(config.output_dir, name)
        )
        for name, (adv, l1, style) in ABLATION_GRID.items()
    }


def lr_schedule(iteration: int, config: TrainingConfig) -> float:
    """Constant, then linear decay reaching exactly zero at ``total_iterations``."""
    total, flat = config.total_iterations, config.lr_constant_until
    if not 0 <= iteration <= total:
        raise ValueError(f"iteration {iteration} outside [0, {total}]")
    if iteration < flat:
        return config.lr_initial
    if iteration == total:
        return 0.0
    # ratio first: exactly 1.0 at the knee and monotone under rounding
    return config.lr_initial * ((total - iteration) / (total - flat))


def exemplar_fingerprint(exemplar: torch.Tensor) -> str:
    return hashlib.sha256(exemplar.detach().cpu().float().contiguous().numpy().tobytes()).hexdigest()


@dataclass
class TrainState:
    config: TrainingConfig
    exemplar: torch.Tensor
    generator: torch.nn.Module
    discriminator: torch.nn.Module
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    rng: np.random.Generator
    extractor: torch.nn.Module | None
    weights: LossWeights
    style_layers: StyleLayerSet = field(default_factory=StyleLayerSet)
    iteration: int = 0
    history: list = field(default_factory=list)

    @property
    def device(self):
        return torch.device(self.config.device)


def _adam(params, config):
    return torch.optim.Adam(
        params, lr=config.lr_initial, betas=(config.adam_beta1, config.adam_beta2), eps=config.adam_eps
    )


def init_state(config: TrainingConfig, exemplar: torch.Tensor | None = None) -> TrainState:
    """Fresh networks, optimisers and RNG stream for ``config``."""
    if exemplar is None:
        exemplar = imagecore.load_image(config.exemplar)
    H, W = exemplar.shape[-2:]
    k = config.k
    if H < 2 * k or W < 2 * k:
        raise SamplingError(f"exemplar {H}x{W} is too small for k={k}; need at least {2 * k}x{2 * k}")
    check_disc_input(config.discriminator_spec, 2 * k, 2 * k)
    if config.deterministic:
        torch.use_deterministic_algorithms(True)

    device = torch.device(config.device)
    gen = torch.Generator().manual_seed(config.seed)
    G = build_generator(config.generator_spec, gen).to(device)
    D = build_discriminator(config.discriminator_spec, gen).to(device)

    weights = config.loss_weights
    extractor = None
    if weights.enable_style:
        try:
            extractor = load_extractor(config.extractor or None, config.extractor_sha256 or None).to(device)
        except ExtractorError as exc:
            if isinstance(exc.__cause__, IntegrityError):
                raise
            msg = f"STYLE LOSS DISABLED: {exc}"
            log.warning(msg)
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
            weights = dataclasses.replace(weights, enable_style=False)
            if not (weights.enable_adv or weights.enable_l1):
                raise ConfigError("style loss is the only enabled term but no extractor is available") from exc

    return TrainState(
        config=config,
        exemplar=exemplar.to(device),
        generator=G,
        discriminator=D,
        opt_g=_adam(G.parameters(), config),
        opt_d=_adam(D.parameters(), config),
        rng=np.random.default_rng(config.seed),
        extractor=extractor,
        weights=weights,
    )


def _set_lr(opt, lr):
    for group in opt.param_groups:
        group["lr"] = lr


def train_step(state: TrainState) -> LossReport:
    cfg, w = state.config, state.weights
    it = state.iteration
    lr = lr_schedule(it, cfg)
    _set_lr(state.opt_g, lr)
    _set_lr(state.opt_d, lr)
    G, D = state.generator, state.discriminator
    G.train()
    D.train()

    source, target = sample_batch(state.exemplar, cfg.k, cfg.batch_size, state.rng, cfg.augment)
    fake = G(source)

    adv_d = 0.0
    if w.enable_adv:
        loss_d = discriminator_loss(D(target), D(fake.detach()))
        if not is_finite(loss_d):
            _diverged(state, "discriminator", loss_d)
        state.opt_d.zero_grad(set_to_none=True)
        loss_d.backward()
        state.opt_d.step()
        adv_d = loss_d.item()

    zero = fake.new_zeros(())
    D.requires_grad_(False)
    try:
        adv_g = generator_adv_loss(D(fake)) if w.enable_adv else zero
    finally:
        D.requires_grad_(True)
    l1 = l1_loss(fake, target) if w.enable_l1 else zero
    style = style_loss(fake, target, state.extractor, state.style_layers) if w.enable_style else zero
    total = total_generator_loss(adv_g, l1, style, w)
    if not is_finite(total):
        _diverged(state, "generator", total)
    state.opt_g.zero_grad(set_to_none=True)
    total.backward()
    state.opt_g.step()

    state.iteration = it + 1
    report = LossReport(
        iteration=state.iteration,
        lr=lr,
        adv_G=adv_g.item(),
        adv_D=adv_d,
        l1=l1.item(),
        style=style.item(),
        total_G=total.item(),
    )
    state.history.append(report)
    if len(state.history) > cfg.history_tail:
        del state.history[: len(state.history) - cfg.history_tail]
    return report


def _diverged(state, which, value):
    path = os.path.join(state.config.output_dir, "diverged.ckpt")
    try:
        os.makedirs(state.config.output_dir, exist_ok=True)
        to_checkpoint(state).save(path)
    except (OSError, ArchiveError) as exc:
        log.error("could not write diagnostic checkpoint: %s", exc)
        path = None
    raise TrainingDivergedError(
        f"non-finite {which} loss ({value.item()}) at iteration {state.iteration + 1}; diagnostic checkpoint: {path}"
    )


@dataclass
class Checkpoint:
    """Archive tensors plus the JSON sidecar describing how to rebuild the run."""

    tensors: dict
    meta: dict

    @property
    def iteration(self) -> int:
        return int(self.meta["iteration"])

    @property
    def config(self) -> TrainingConfig:
        return config_from_dict(self.meta["config"])

    def section(self, prefix: str) -> dict:
        p = prefix + "/"
        return {k[len(p) :]: v for k, v in self.tensors.items() if k.startswith(p)}

    def save(self, path) -> None:
        path = os.fspath(path)
        digest = save_archive(path, self.tensors, {"format": "texpand-checkpoint", "version": FORMAT_VERSION})
        meta = dict(self.meta, payload_sha256=digest)
        tmp = path + ".json.tmp"
        with open(tmp, "w") as fh:
            json.dump(meta, fh, indent=1, sort_keys=True)
        os.replace(tmp, path + ".json")
        self.meta = meta

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = os.fspath(path)
        tensors, archive_meta = load_archive(path)
        if archive_meta.get("format") != "texpand-checkpoint":
            raise ArchiveError(f"{path} is not a training checkpoint")
        if int(archive_meta.get("version", -1)) != FORMAT_VERSION:
            raise ArchiveError(f"checkpoint version {archive_meta.get('version')} != supported {FORMAT_VERSION}")
        try:
            with open(path + ".json") as fh:
                meta = json.load(fh)
        except (OSError, ValueError) as exc:
            raise ArchiveError(f"missing or unreadable sidecar {path}.json: {exc}") from exc
        if meta.get("payload_sha256") != archive_meta.get("payload_sha256"):
            raise IntegrityError(f"sidecar of {path} belongs to a different payload")
        return cls(tensors, meta)


def _module_tensors(prefix, module):
    return {f"{prefix}/{k}": v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def _optimizer_tensors(prefix, opt, module):
    out = {}
    for name, param in module.named_parameters():
        for key, value in opt.state.get(param, {}).items():
            if torch.is_tensor(value):
                out[f"{prefix}/{name}/{key}"] = value.detach().cpu().numpy().copy()
    return out


def _restore_optimizer(opt, module, tensors):
    by_param = {}
    for key, value in tensors.items():
        name, slot = key.rsplit("/", 1)
        by_param.setdefault(name, {})[slot] = torch.from_numpy(np.array(value))
    params = dict(module.named_parameters())
    unknown = sorted(set(by_param) - set(params))
    if unknown:
        raise ArchiveError(f"optimizer state for unknown parameters: {unknown[:5]}")
    opt.state.clear()
    for name, slots in by_param.items():
        param = params[name]
        opt.state[param] = {k: v.to(param.device) if k != "step" else v for k, v in slots.items()}


def _rng_state_json(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def to_checkpoint(state: TrainState) -> Checkpoint:
    tensors = {}
    tensors.update(_module_tensors("generator", state.generator))
    tensors.update(_module_tensors("discriminator", state.discriminator))
    tensors.update(_optimizer_tensors("opt_g", state.opt_g, state.generator))
    tensors.update(_optimizer_tensors("opt_d", state.opt_d, state.discriminator))
    meta = {
        "format_version": FORMAT_VERSION,
        "iteration": state.iteration,
        "config": state.config.to_dict(),
        "generator_spec": state.generator.spec.to_dict(),
        "generator_spec_hash": state.generator.spec.hash(),
        "discriminator_spec": state.discriminator.spec.to_dict(),
        "discriminator_spec_hash": state.discriminator.spec.hash(),
        "exemplar_fingerprint": exemplar_fingerprint(state.exemplar),
        "style_active": state.weights.enable_style,
        "rng_state": _rng_state_json(state.rng),
        "history_tail": [r.as_dict() for r in state.history],
    }
    return Checkpoint(tensors, meta)


def resume(checkpoint, config: TrainingConfig | None = None, exemplar: torch.Tensor | None = None) -> TrainState:
    """Rebuild a training state from a checkpoint (object, file, or run directory).

    A supplied ``config`` may only differ in I/O fields; anything else raises
    ``ConfigMismatchError`` naming the offending fields.
    """
    if not isinstance(checkpoint, Checkpoint):
        checkpoint = Checkpoint.load(resolve_checkpoint(checkpoint))
    if int(checkpoint.meta.get("format_version", -1)) != FORMAT_VERSION:
        raise ArchiveError(f"unsupported checkpoint format {checkpoint.meta.get('format_version')}")
    saved = checkpoint.config
    if config is None:
        config = saved
    else:
        diff = {f for f in saved.to_dict() if f not in RESUME_MUTABLE and getattr(saved, f) != getattr(config, f)}
        if diff:
            raise ConfigMismatchError(diff)
    if config.generator_spec.hash() != checkpoint.meta["generator_spec_hash"]:
        raise ConfigMismatchError({"generator_spec"})
    if config.discriminator_spec.hash() != checkpoint.meta["discriminator_spec_hash"]:
        raise ConfigMismatchError({"discriminator_spec"})

    state = init_state(config, exemplar)
    if exemplar_fingerprint(state.exemplar) != checkpoint.meta["exemplar_fingerprint"]:
        raise ConfigMismatchError({"exemplar (content fingerprint)"})
    if state.weights.enable_style != checkpoint.meta["style_active"]:
        raise ConfigMismatchError({"extractor (style loss availability)"})

    device = state.device
    for prefix, module in (("generator", state.generator), ("discriminator", state.discriminator)):
        section = checkpoint.section(prefix)
        expected = module.state_dict()
        if set(section) != set(expected):
            raise ArchiveError(f"{prefix} tensors do not match the network layout")
        module.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in section.items()})
        module.to(device)
    _restore_optimizer(state.opt_g, state.generator, checkpoint.section("opt_g"))
    _restore_optimizer(state.opt_d, state.discriminator, checkpoint.section("opt_d"))
    state.rng.bit_generator.state = checkpoint.meta["rng_state"]
    state.iteration = checkpoint.iteration
    state.history = [LossReport(**r) for r in checkpoint.meta.get("history_tail", [])]
    return state


def checkpoint_name(iteration: int) -> str:
    return f"ckpt_{iteration:07d}.safetensors"


def resolve_checkpoint(path) -> str:
    """Accept a checkpoint file or a run directory (follows its ``latest`` pointer)."""
    path = os.fspath(path)
    if os.path.isdir(path):
        pointer = os.path.join(path, LATEST_NAME)
        try:
            with open(pointer) as fh:
                return os.path.join(path, fh.read().strip())
        except OSError as exc:
            raise ArchiveError(f"run directory {path} has no latest checkpoint pointer") from exc
    return path


def write_checkpoint(state: TrainState) -> str:
    """Write a numbered checkpoint, then atomically repoint ``latest`` at it."""
    out = state.config.output_dir
    os.makedirs(out, exist_ok=True)
    name = checkpoint_name(state.iteration)
    path = os.path.join(out, name)
    to_checkpoint(state).save(path)
    tmp = os.path.join(out, LATEST_NAME + ".tmp")
    with open(tmp, "w") as fh:
        fh.write(name + "\n")
    os.replace(tmp, os.path.join(out, LATEST_NAME))
    _prune(out, state.config.keep_checkpoints)
    return path


def _prune(out, keep):
    names = sorted(n for n in os.listdir(out) if n.startswith("ckpt_") and n.endswith(".safetensors"))
    for stale in names[:-keep]:
        for p in (stale, stale + ".json"):
            try:
                os.remove(os.path.join(out, p))
            except FileNotFoundError:
                pass


def _open_log(config, fresh):
    os.makedirs(config.output_dir, exist_ok=True)
    path = os.path.join(config.output_dir, LOG_NAME)
    new = fresh or not os.path.exists(path)
    fh = open(path, "w" if new else "a")
    if new:
        fh.write("\t".join(LossReport.FIELDS) + "\n")
    return fh


def read_log(path) -> list:
    with open(path) as fh:
        lines = fh.read().splitlines()
    return [LossReport.from_tsv(line) for line in lines[1:] if line]


def train(
    config: TrainingConfig,
    resume_from=None,
    exemplar: torch.Tensor | None = None,
    stop_at: int | None = None,
) -> Checkpoint:
    """Run training to ``total_iterations`` (or ``stop_at``) and return the final checkpoint.

    Writes a tab-separated loss log, periodic checkpoints and a final one to
    ``config.output_dir``.
    """
    if resume_from is not None:
        state = resume(resume_from, config, exemplar)
    else:
        state = init_state(config, exemplar)
    end = config.total_iterations if stop_at is None else min(stop_at, config.total_iterations)
    with _open_log(config, fresh=resume_from is None) as logfh:
        while state.iteration < end:
            report = train_step(state)
            it = report.iteration
            if it % config.log_every == 0 or it == end:
                logfh.write(report.tsv() + "\n")
                logfh.flush()
                log.info(
                    "iter %d lr %.3g adv_G %.4f adv_D %.4f l1 %.4f style %.4f total %.4f",
                    it, report.lr, report.adv_G, report.adv_D, report.l1, report.style, report.total_G,
                )  # fmt: skip
            if config.checkpoint_every and it % config.checkpoint_every == 0 and it != end:
                path = write_checkpoint(state)
                log.info("checkpoint %s (style %.5g)", path, report.style)
    path = write_checkpoint(state)
    log.info("final checkpoint %s", path)
    return Checkpoint.load(path)


def load_generator(path):
    """Generator in inference mode from a checkpoint file or run directory."""
    from .generator import Generator

    ckpt = Checkpoint.load(resolve_checkpoint(path))
    net = Generator(GeneratorSpec.from_dict(ckpt.meta["generator_spec"]))
    section = ckpt.section("generator")
    if set(section) != set(net.state_dict()):
        raise ArchiveError("checkpoint generator tensors do not match its recorded spec")
    net.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in section.items()})
    return net.eval()


def checkpoint_hash(path) -> str:
    """sha256 of a checkpoint file and its sidecar."""
    path = resolve_checkpoint(path)
    return hashlib.sha256((file_sha256(path) + file_sha256(path + ".json")).encode()).hexdigest()
