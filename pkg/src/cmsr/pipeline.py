"""Orchestration shared by the command line and the acceptance experiment."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import Config
from .data import ImageSet, synth_textures, upsample_nearest_x4
from .denoiser import DenoiserModel, UNetConfig, parameter_shapes
from .distillation import LossCurve, TrainState, distill, init_distill_state, train_teacher
from .errors import CheckpointError, ConfigError, InsufficientDataError
from .metrics import MetricReport, ProxyExtractor, improvement_report, proxy_fid
from .samplers import SamplerRun, cm_sample, ddim_sample, ddpm_sample
from .schedule import BoundaryScalings, NoiseSchedule, cd_timesteps, default_cm_step_times, linear_beta_schedule

logger = logging.getLogger(__name__)

SAMPLERS = ("ddpm", "ddim", "cm")


def build_schedule(cfg: Config) -> NoiseSchedule:
    return linear_beta_schedule(cfg.schedule.T, cfg.schedule.beta_1, cfg.schedule.beta_T)


def build_scalings(cfg: Config) -> BoundaryScalings:
    return BoundaryScalings(timestep_scaling=cfg.hp.timestep_scaling)


def cm_step_times(cfg: Config, steps: int | None = None) -> list[int]:
    times = list(cfg.sampling.cm_step_times or default_cm_step_times(cfg.schedule.T))
    if steps is not None:
        if not 1 <= steps <= len(times):
            raise ConfigError(f"cm sampling supports 1 to {len(times)} steps, got {steps}")
        times = times[:steps]
    return times


# ---------------------------------------------------------------- datasets


def data_path(cfg: Config, split: str) -> Path:
    return Path(cfg.output_dir) / f"{split}_data.cmsr"


def load_split(cfg: Config, split: str) -> ImageSet:
    """Training or test images, synthetic or prepared by ``cmsr etl``."""
    d = cfg.data
    if d.source == "synthetic":
        count, seed = (d.train_count, d.train_seed) if split == "train" else (d.test_count, d.test_seed)
        return synth_textures(d.textures, d.image_size, count, seed)
    path = data_path(cfg, split)
    if not path.exists():
        raise InsufficientDataError(f"no prepared {split} split at {path}; run `cmsr etl` first")
    tensors = checkpoint.load(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    ids = [r["id"] for r in manifest["records"]]
    return ImageSet(ids, tensors["pixels"], tensors["lowres"])


def save_split(cfg: Config, split: str, images: ImageSet, manifest_json: str) -> Path:
    path = data_path(cfg, split)
    checkpoint.save(path, {"pixels": images.pixels, "lowres": images.lowres})
    path.with_suffix(".json").write_text(manifest_json)
    return path


# ---------------------------------------------------------------- checkpoints


def _unet_meta(cfg: UNetConfig) -> np.ndarray:
    return np.array([cfg.in_channels, cfg.base_channels, cfg.depth, cfg.time_embed_dim, cfg.prior_std], dtype=np.float64)


def state_tensors(state: TrainState) -> dict[str, np.ndarray]:
    out = {"meta/unet": _unet_meta(state.student.config), "meta/step": np.array([state.step], dtype=np.float64)}
    for name, p in state.theta.items():
        out[f"theta/{name}"] = p.data
    if state.target is not None:
        for name, p in state.target.params.items():
            out[f"theta_minus/{name}"] = p.data
    for name in state.theta:
        out[f"opt_m/{name}"] = state.opt_m[name]
        out[f"opt_v/{name}"] = state.opt_v[name]
    return out


def _check_tensors(tensors: dict[str, np.ndarray], cfg: UNetConfig, prefix: str) -> None:
    meta = tensors.get("meta/unet")
    if meta is None or not np.array_equal(meta, _unet_meta(cfg)):
        raise CheckpointError(f"tensor meta/unet: checkpoint built for U-Net {meta}, config expects {_unet_meta(cfg)}")
    for name, shape in parameter_shapes(cfg).items():
        key = f"{prefix}/{name}"
        if key not in tensors:
            raise CheckpointError(f"tensor {key} missing from checkpoint")
        if tensors[key].shape != shape:
            raise CheckpointError(f"tensor {key}: shape {tensors[key].shape} does not match config {shape}")


def model_from_tensors(
    tensors, cfg: UNetConfig, prefix: str = "theta", requires_grad: bool = False, schedule: NoiseSchedule | None = None
) -> DenoiserModel:
    _check_tensors(tensors, cfg, prefix)
    model = DenoiserModel.init(cfg, requires_grad=requires_grad, schedule=schedule)
    model.load_state_dict({k: tensors[f"{prefix}/{k}"] for k in model.params})
    return model


def load_model(path, cfg: Config, prefix: str | None = None) -> DenoiserModel:
    """Sampling weights from a checkpoint: the averaged ``theta_minus`` when present, else ``theta``."""
    tensors = checkpoint.load(path)
    if prefix is None:
        prefix = "theta_minus" if any(k.startswith("theta_minus/") for k in tensors) else "theta"
    return model_from_tensors(tensors, cfg.unet, prefix, schedule=build_schedule(cfg))


def state_from_tensors(tensors, cfg: Config, mu: float, lr: float, with_target: bool) -> TrainState:
    schedule = build_schedule(cfg)
    student = model_from_tensors(tensors, cfg.unet, "theta", requires_grad=True, schedule=schedule)
    target = model_from_tensors(tensors, cfg.unet, "theta_minus", schedule=schedule) if with_target else None
    state = TrainState(student, target, mu=mu, lr=lr, step=int(tensors["meta/step"][0]))
    for name in student.params:
        for slot, store in (("opt_m", state.opt_m), ("opt_v", state.opt_v)):
            key = f"{slot}/{name}"
            if key not in tensors or tensors[key].shape != store[name].shape:
                raise CheckpointError(f"tensor {key} missing or mis-shaped")
            store[name] = tensors[key].copy()
    return state


# ---------------------------------------------------------------- training


def write_curve(path: Path, curve: LossCurve, resume_step: int = 0) -> None:
    """Line-delimited ``{"step", "loss"}`` records; on resume keeps records up to ``resume_step``."""
    kept = []
    if resume_step and path.exists():
        kept = [line for line in path.read_text().splitlines() if line and json.loads(line)["step"] <= resume_step]
    lines = kept + [json.dumps({"step": s, "loss": l}) for s, l in curve]
    path.write_text("\n".join(lines) + ("\n" if lines else ""))


def _periodic(cfg: Config, out_dir: Path, stem: str, log_every: int = 250):
    every = cfg.train.checkpoint_every

    def callback(state: TrainState, loss: float) -> None:
        if state.step % log_every == 0:
            logger.info("%s step %d loss %.6f", stem, state.step, loss)
        if every and state.step % every == 0:
            checkpoint.save(out_dir / f"{stem}_step{state.step:06d}.cmsr", state_tensors(state))

    return callback


def run_teacher(cfg: Config, resume: str | None = None) -> tuple[TrainState, LossCurve, Path]:
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    schedule = build_schedule(cfg)
    data = load_split(cfg, "train")
    lr, ema = cfg.train.teacher_lr, cfg.train.teacher_ema
    if resume:
        state = state_from_tensors(checkpoint.load(resume), cfg, ema, lr, with_target=ema > 0)
        model = state.student
    else:
        model = DenoiserModel.init(cfg.unet, seed=cfg.train.model_seed, schedule=schedule)
        state = TrainState(model, model.copy(requires_grad=False) if ema > 0 else None, mu=ema, lr=lr)
    start = state.step
    state, curve = train_teacher(
        data, model, schedule, cfg.hp, cfg.train.teacher_steps, cfg.train.seed, state, _periodic(cfg, out_dir, "teacher")
    )
    path = out_dir / "teacher.cmsr"
    checkpoint.save(path, state_tensors(state))
    write_curve(out_dir / "teacher_loss.jsonl", curve, start)
    return state, curve, path


def run_distill(cfg: Config, teacher_path, resume: str | None = None) -> tuple[TrainState, LossCurve, Path]:
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    schedule = build_schedule(cfg)
    teacher = load_model(teacher_path, cfg)
    data = load_split(cfg, "train")
    tmap = cd_timesteps(schedule, cfg.hp.N)
    if resume:
        state = state_from_tensors(checkpoint.load(resume), cfg, cfg.hp.mu, cfg.hp.lr, with_target=True)
    else:
        state = init_distill_state(teacher, cfg.hp)
    start = state.step
    state, curve = distill(
        teacher,
        data,
        cfg.hp,
        schedule,
        tmap,
        build_scalings(cfg),
        cfg.train.distill_steps,
        cfg.train.seed,
        state,
        _periodic(cfg, out_dir, "student"),
    )
    path = out_dir / "student.cmsr"
    checkpoint.save(path, state_tensors(state))
    write_curve(out_dir / "distill_loss.jsonl", curve, start)
    return state, curve, path


# ---------------------------------------------------------------- sampling


@dataclass
class UpscaleResult:
    images: np.ndarray
    nfe: int
    wall_time: float
    sampler: str


def upscale(
    model: DenoiserModel,
    lowres: np.ndarray,
    cfg: Config,
    sampler: str = "cm",
    steps: int | None = None,
    stride: int | None = None,
    seed: int | None = None,
) -> UpscaleResult:
    """Super-resolve a batch of (N, C, h, w) conditions to (N, C, 4h, 4w), clamped to [-1, 1]."""
    schedule = build_schedule(cfg)
    seed = cfg.sampling.seed if seed is None else seed
    clip = cfg.sampling.clip_denoised
    start = time.perf_counter()
    if sampler == "cm":
        run = SamplerRun(seed=seed)
        out = cm_sample(model, lowres, schedule, build_scalings(cfg), cm_step_times(cfg, steps), run)
    elif sampler == "ddim":
        run = SamplerRun(seed=seed, steps=steps or cfg.sampling.ddim_steps, clip_denoised=clip)
        tau = stride if stride is not None else cd_timesteps(schedule, run.steps)
        out = ddim_sample(model, lowres, schedule, tau, run)
    elif sampler == "ddpm":
        run = SamplerRun(seed=seed, steps=schedule.T)
        out = ddpm_sample(model, lowres, schedule, run)
    else:
        raise ConfigError(f"unknown sampler {sampler!r}; choose from {SAMPLERS}")
    return UpscaleResult(np.clip(out, -1.0, 1.0), run.nfe, time.perf_counter() - start, sampler)


def evaluate(
    cfg: Config,
    model: DenoiserModel,
    test: ImageSet,
    sampler: str = "cm",
    teacher: DenoiserModel | None = None,
    upscaled: np.ndarray | None = None,
    extractor: ProxyExtractor | None = None,
) -> MetricReport:
    """Score super-resolved test images against references and the nearest-upsample baseline.

    ``upscaled`` injects precomputed model outputs. With ``teacher`` the
    report also carries the teacher's DDIM proxy-FID for comparison.
    """
    extractor = extractor or ProxyExtractor()
    nfe = None
    if upscaled is None:
        result = upscale(model, test.lowres, cfg, sampler)
        upscaled, nfe = result.images, result.nfe
    baseline = upsample_nearest_x4(test.lowres)
    report = improvement_report(test.pixels, upscaled, baseline, extractor, test.ids)
    report.extra.update({"sampler": sampler, "nfe": nfe})
    if teacher is not None:
        ref = upscale(teacher, test.lowres, cfg, "ddim")
        report.extra.update(
            {
                "teacher_sampler": "ddim",
                "teacher_nfe": ref.nfe,
                "teacher_proxy_fid": proxy_fid(ref.images, test.pixels, extractor),
            }
        )
    return report
