"""Stack reconstruction pipeline.

Stages, in order: standardize every slice on a scale trained from the stack
itself; partition into subvolumes; per subvolume select the best reference
slice, register consecutive pairs, resolve the serial chains to the
reference, warp and re-standardize, then (in lags mode) elastically refine
each slice against its chain-warped neighbor toward the reference; rigidly
register each subvolume to the previous one via their boundary slices; and
finally write the aligned stack, all transforms, selection and alignment
reports, and a config snapshot.

Outputs are deterministic for a fixed config and input stack; wall-clock
timestamps appear only in ``run_report.txt``.
"""

from __future__ import annotations

import hashlib
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path

from histostack import __version__
from histostack.brs import (
    BRS_MODES,
    BrsReport,
    partition_stack,
    select_brs,
    write_brs_csv,
)
from histostack.cam import CamConfig, CamResult, cam_stack, write_cam_csv
from histostack.features import entropy
from histostack.image import Image, warp
from histostack.imageio import read_image, write_pgm
from histostack.register import (
    RegistrationConfig,
    register_affine,
    register_lags,
    register_rigid,
)
from histostack.standardize import (
    DegenerateHistogramError,
    NotBimodalError,
    ScaleConfig,
    standardize_image,
    train_scale,
)
from histostack.transform import (
    Affine2D,
    TransformChain,
    format_affine,
    write_affine_chain,
    write_field,
)

logger = logging.getLogger(__name__)

MODES = ("rigid", "affine", "lags")


class PipelineError(Exception):
    pass


class ManifestError(Exception):
    pass


@dataclass(frozen=True)
class StackManifest:
    """Ordered slice index -> file path listing (indices contiguous from 1)."""

    entries: tuple[tuple[int, Path], ...]

    def __post_init__(self):
        for pos, (index, _) in enumerate(self.entries, start=1):
            if index != pos:
                raise ManifestError("manifest indices must be contiguous from 1")

    def __len__(self) -> int:
        return len(self.entries)

    def paths(self) -> list[Path]:
        return [path for _, path in self.entries]

    @staticmethod
    def load(path) -> "StackManifest":
        path = Path(path)
        base = path.parent
        entries = []
        try:
            text = path.read_text()
        except OSError as exc:
            raise ManifestError(f"cannot read manifest: {exc}") from exc
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t") if "\t" in line else line.split(None, 1)
            if len(parts) != 2:
                raise ManifestError(f"bad manifest line: {line!r}")
            try:
                index = int(parts[0])
            except ValueError:
                raise ManifestError(f"bad manifest line: {line!r}") from None
            p = Path(parts[1])
            if not p.is_absolute():
                p = base / p
            if not p.exists():
                raise ManifestError(f"missing slice file: {p}")
            entries.append((index, p))
        entries.sort(key=lambda e: e[0])
        if not entries:
            raise ManifestError(f"empty manifest: {path}")
        return StackManifest(tuple(entries))

    @staticmethod
    def write(path, slice_paths, header_comments=()) -> None:
        path = Path(path)
        base = path.parent
        lines = [f"# {comment}\n" for comment in header_comments]
        for k, p in enumerate(slice_paths, start=1):
            p = Path(p)
            try:
                rel = p.relative_to(base)
            except ValueError:
                rel = p
            lines.append(f"{k}\t{rel}\n")
        path.write_text("".join(lines))


@dataclass(frozen=True)
class RunConfig:
    """Every knob of the pipeline plus the output directory.

    Serialized as flat ``key = value`` text with ``#`` comments; the
    snapshot written into each run directory omits ``output_dir`` so reruns
    into different directories stay byte-comparable.
    """

    mode: str = "lags"
    brs_mode: str = "scored"
    subvolume_size: int = 25
    jobs: int = 1
    output_dir: str = "histostack_out"
    s1: int = 1
    s2: int = 4095
    pc1: float = 0.0
    pc2: float = 99.8
    pyramid_levels: int = 4
    max_iterations: int = 50
    convergence_tol: float = 1e-4
    r_f: float = 3.0
    lags_block_size: int = 32
    lags_smoothness_weight: float = 10.0
    lags_outer_iterations: int = 5
    min_overlap: float = 0.25
    cam_window: int = 21
    cam_search_radius: int = 10
    cam_grid_spacing: int = 16
    cam_tau: float = 0.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.brs_mode not in BRS_MODES:
            raise ValueError(f"brs_mode must be one of {BRS_MODES}")
        if self.subvolume_size < 2:
            raise ValueError("subvolume_size must be >= 2")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")

    def scale_config(self) -> ScaleConfig:
        return ScaleConfig(self.s1, self.s2, self.pc1, self.pc2)

    def registration_config(self, scale=None) -> RegistrationConfig:
        return RegistrationConfig(
            pyramid_levels=self.pyramid_levels,
            max_iterations=self.max_iterations,
            convergence_tol=self.convergence_tol,
            r_f=self.r_f,
            lags_block_size=self.lags_block_size,
            lags_smoothness_weight=self.lags_smoothness_weight,
            lags_outer_iterations=self.lags_outer_iterations,
            min_overlap=self.min_overlap,
            standard_scale=scale,
        )

    def cam_config(self) -> CamConfig:
        return CamConfig(
            match_window=self.cam_window,
            search_radius=self.cam_search_radius,
            grid_spacing=self.cam_grid_spacing,
            tau=self.cam_tau,
        )

    def snapshot_text(self) -> str:
        lines = []
        for f in sorted(fields(self), key=lambda f: f.name):
            if f.name == "output_dir":
                continue
            lines.append(f"{f.name} = {getattr(self, f.name)!r}\n")
        return "".join(lines)

    @staticmethod
    def from_file(path) -> "RunConfig":
        values = {}
        field_types = {f.name: f for f in fields(RunConfig)}
        with open(path) as fh:
            for raw in fh:
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"bad config line: {raw.rstrip()}")
                key, value = (part.strip() for part in line.split("=", 1))
                if key not in field_types:
                    raise ValueError(f"unknown config key {key!r}")
                default = getattr(RunConfig, key)
                if isinstance(default, bool):
                    values[key] = value.lower() in ("1", "true", "yes")
                elif isinstance(default, int):
                    values[key] = int(value)
                elif isinstance(default, float):
                    values[key] = float(value)
                else:
                    values[key] = value.strip("'\"")
        return RunConfig(**values)

    def with_overrides(self, **kwargs) -> "RunConfig":
        updates = {k: v for k, v in kwargs.items() if v is not None}
        return replace(self, **updates)


def _restd(img: Image, scale) -> Image:
    """Standardize, falling back to the input when the content no longer
    supports landmark extraction (e.g. nearly everything warped away)."""
    try:
        return standardize_image(img, scale)
    except (DegenerateHistogramError, NotBimodalError, ValueError) as exc:
        logger.warning("keeping unstandardized image: %s", exc)
        return img


class _RunLog:
    """Accumulates report lines, stage wall times, and registration rows."""

    def __init__(self):
        self.stage_times: list[tuple[str, float]] = []
        self.notes: list[str] = []
        self.reg_rows: list[str] = []

    def add_registration(self, stage: str, src: int, dst: int, result) -> None:
        for level, iteration, mse in result.log:
            self.reg_rows.append(
                "%s,%d,%d,%d,%d,%s\n" % (stage, src, dst, level, iteration, repr(mse))
            )
        self.reg_rows.append(
            "%s,%d,%d,final,%d,%s\n"
            % (stage, src, dst, result.iterations_used, repr(result.final_mse))
        )


def _percent_drop(baseline: float, value: float) -> float:
    if not (baseline > 0) or math.isnan(value):
        return math.nan
    return (1.0 - value / baseline) * 100.0


def run_reconstruct(manifest: StackManifest, cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    marker = out / "incomplete"
    marker.write_text("stage setup: started\n")
    (out / "aligned").mkdir(exist_ok=True)
    (out / "transforms").mkdir(exist_ok=True)
    (out / "reports").mkdir(exist_ok=True)

    run_log = _RunLog()
    stage = "setup"
    pool = ThreadPoolExecutor(max_workers=cfg.jobs) if cfg.jobs > 1 else None
    pmap = pool.map if pool is not None else map
    started = time.strftime("%Y-%m-%d %H:%M:%S")
    t_run = time.monotonic()

    def _stage_done(name: str, t0: float) -> None:
        run_log.stage_times.append((name, time.monotonic() - t0))

    try:
        stage = "standardize"
        t0 = time.monotonic()
        images = list(pmap(read_image, manifest.paths()))
        scale = train_scale(images, cfg.scale_config())
        std = list(pmap(lambda im: standardize_image(im, scale), images))
        reg_cfg = cfg.registration_config(scale)
        _stage_done(stage, t0)

        stage = "partition"
        t0 = time.monotonic()
        part = partition_stack(len(std), cfg.subvolume_size)
        _stage_done(stage, t0)

        brs_reports: list[BrsReport] = []
        brs_global: list[int] = []
        sv_aligned: list[list[Image]] = []
        sv_affine_stage: list[list[Image]] = []
        chain_files = []
        resolved: dict[int, Affine2D] = {}

        for k, (start, end) in enumerate(part.boundaries, start=1):
            stage = f"subvolume {k} reference selection"
            t0 = time.monotonic()
            sv = std[start - 1 : end]
            n = len(sv)
            if n == 1:
                report = BrsReport(1, (entropy(sv[0]),), {}, {}, 1, cfg.brs_mode)
            else:
                report = select_brs(sv, reg_cfg, cfg.brs_mode, registration_map=pmap)
            brs_reports.append(report)
            ref = report.chosen
            brs_global.append(start + ref - 1)
            _stage_done(stage, t0)

            stage = f"subvolume {k} serial registration"
            t0 = time.monotonic()
            reg_pair = register_rigid if cfg.mode == "rigid" else register_affine
            link_specs = [
                (i, i + 1 if i < ref else i - 1) for i in range(1, n + 1) if i != ref
            ]
            link_results = list(
                pmap(lambda sd: reg_pair(sv[sd[0] - 1], sv[sd[1] - 1], reg_cfg), link_specs)
            )
            chain = TransformChain()
            chain_entries = []
            for (src, dst), result in zip(link_specs, link_results):
                chain.add_link(src, dst, result.transform)
                run_log.add_registration(
                    f"links sv{k}", start + src - 1, start + dst - 1, result
                )
                chain_entries.append(((start + src - 1, start + dst - 1), result.transform))
            chain_files.append(chain_entries)
            chains = {i: chain.resolve(i, ref) for i in range(1, n + 1)}
            for i, t in chains.items():
                resolved[start + i - 1] = t
            affine_aligned = [
                sv[i - 1]
                if i == ref
                else _restd(warp(sv[i - 1], chains[i]), scale)
                for i in range(1, n + 1)
            ]
            _stage_done(stage, t0)

            if cfg.mode == "lags":
                stage = f"subvolume {k} elastic refinement"
                t0 = time.monotonic()

                def _refine(i: int):
                    if i == ref:
                        return None
                    neighbor = i + 1 if i < ref else i - 1
                    return register_lags(
                        sv[i - 1], affine_aligned[neighbor - 1], chains[i], reg_cfg
                    )
                refinements = list(pmap(_refine, range(1, n + 1)))
                aligned = []
                for i, result in zip(range(1, n + 1), refinements):
                    if result is None:
                        aligned.append(sv[i - 1])
                        continue
                    run_log.add_registration(
                        f"lags sv{k}", start + i - 1, brs_global[-1], result
                    )
                    write_field(
                        out / "transforms" / f"field_{start + i - 1:04d}.laf",
                        result.transform,
                    )
                    aligned.append(_restd(warp(sv[i - 1], result.transform), scale))
                sv_affine_stage.append(affine_aligned)
                sv_aligned.append(aligned)
                _stage_done(stage, t0)
            else:
                sv_affine_stage.append(affine_aligned)
                sv_aligned.append(affine_aligned)

        stage = "inter-subvolume rigid alignment"
        t0 = time.monotonic()
        placed: list[Image] = list(sv_aligned[0])
        placed_affine: list[Image] = list(sv_affine_stage[0])
        rigid_list = [Affine2D.identity()]
        for k in range(1, len(part.boundaries)):
            start, end = part.boundaries[k]
            result = register_rigid(sv_aligned[k][0], placed[-1], reg_cfg)
            rigid_list.append(result.transform)
            run_log.add_registration("inter-subvolume", start, start - 1, result)
            placed.extend(
                _restd(warp(img, result.transform), scale) for img in sv_aligned[k]
            )
            placed_affine.extend(
                _restd(warp(img, result.transform), scale)
                for img in sv_affine_stage[k]
            )
        _stage_done(stage, t0)

        stage = "evaluation"
        t0 = time.monotonic()
        cam_cfg = cfg.cam_config()
        cam_results: dict[str, CamResult] = {}
        if len(std) >= 3:
            cam_results["unregistered"] = cam_stack(std, cam_cfg, pmap)
            if cfg.mode == "lags":
                cam_results["affine"] = cam_stack(placed_affine, cam_cfg, pmap)
            cam_results[cfg.mode] = cam_stack(placed, cam_cfg, pmap)
        _stage_done(stage, t0)

        stage = "write outputs"
        t0 = time.monotonic()
        snapshot = cfg.snapshot_text()
        (out / "config.snapshot").write_text(snapshot)
        config_sha = hashlib.sha256(snapshot.encode()).hexdigest()

        aligned_paths = []
        for g, img in enumerate(placed, start=1):
            p = out / "aligned" / f"slice_{g:04d}.pgm"
            write_pgm(p, img)
            aligned_paths.append(p)
        StackManifest.write(
            out / "aligned" / "manifest.txt",
            aligned_paths,
            header_comments=(
                f"histostack {__version__}",
                f"config sha256 {config_sha}",
            ),
        )

        write_affine_chain(
            out / "transforms" / "links.txt",
            [entry for entries in chain_files for entry in entries],
        )
        with open(out / "transforms" / "affine_resolved.txt", "w") as fh:
            for g in sorted(resolved):
                fh.write(f"{g} {format_affine(resolved[g])}\n")
        with open(out / "transforms" / "rigid_subvolumes.txt", "w") as fh:
            for k, t in enumerate(rigid_list, start=1):
                fh.write(f"{k} {format_affine(t)}\n")

        write_brs_csv(out / "reports" / "brs.csv", brs_reports, part)
        for name, result in cam_results.items():
            write_cam_csv(out / "reports" / f"cam_{name}.csv", result)
        with open(out / "reports" / "registration_log.csv", "w") as fh:
            fh.write("stage,source,target,level,iteration,mse\n")
            fh.writelines(run_log.reg_rows)
        _stage_done(stage, t0)
    except Exception as exc:
        marker.write_text(f"stage {stage}: {exc}\n")
        if pool is not None:
            pool.shutdown(wait=False, cancel_futures=True)
        raise PipelineError(f"stage {stage}: {exc}") from exc

    if pool is not None:
        pool.shutdown()

    lines = [
        "histostack reconstruction report\n",
        f"version: {__version__}\n",
        f"started: {started}\n",
        f"mode: {cfg.mode}\n",
        f"brs_mode: {cfg.brs_mode}\n",
        f"config sha256: {config_sha}\n",
        f"slices: {len(std)}\n",
        f"subvolumes: {len(part.boundaries)}\n",
        f"standard scale: s1={scale.s1} s2={scale.s2} mu_s={scale.mu_s}\n",
        "reference slices: "
        + " ".join(str(g) for g in brs_global)
        + "\n",
        "\nstage wall times (s):\n",
    ]
    for name, seconds in run_log.stage_times:
        lines.append(f"  {name}: {seconds:.3f}\n")
    if cam_results:
        lines.append("\ncam summary (cam_variant=midway_residual, population std):\n")
        base = cam_results["unregistered"].mean
        for name, result in cam_results.items():
            drop = _percent_drop(base, result.mean)
            drop_text = "" if name == "unregistered" or math.isnan(drop) else (
                f"  drop_vs_unregistered={drop:.2f}%"
            )
            lines.append(
                f"  {name}: mean={result.mean:.4f} std={result.std:.4f}{drop_text}\n"
            )
    lines.append(f"\nfinished: {time.strftime('%Y-%m-%d %H:%M:%S')}\n")
    lines.append(f"total wall time: {time.monotonic() - t_run:.3f} s\n")
    (out / "run_report.txt").write_text("".join(lines))
    marker.unlink()
    return out


def run_evaluate(manifest: StackManifest, cfg: RunConfig, baseline: CamResult | None = None) -> CamResult:
    """Compute CAM for a stack and write cam.csv plus a short summary."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    pool = ThreadPoolExecutor(max_workers=cfg.jobs) if cfg.jobs > 1 else None
    pmap = pool.map if pool is not None else map
    try:
        images = list(pmap(read_image, manifest.paths()))
        result = cam_stack(images, cfg.cam_config(), pmap)
    finally:
        if pool is not None:
            pool.shutdown()
    write_cam_csv(out / "cam.csv", result)
    lines = [
        f"slices: {len(images)}\n",
        f"cam mean: {result.mean!r}\n",
        f"cam std: {result.std!r}\n",
        "cam_variant: midway_residual\n",
        "std: population\n",
    ]
    if baseline is not None:
        drop = _percent_drop(baseline.mean, result.mean)
        lines.append(f"baseline mean: {baseline.mean!r}\n")
        lines.append(f"drop vs baseline: {drop:.4f}%\n")
    (out / "cam_summary.txt").write_text("".join(lines))
    return result
