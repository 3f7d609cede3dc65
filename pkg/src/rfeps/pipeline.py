"""Stage sequencing, timing and the parameter-sensitivity harness."""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io
from .cloud import OrientedCloud, PipelineConfig, PointLabel, average_gap, \
    build_index, normalize
from .consolidate import augment, project_all, refine_positions, \
    regularize_normals
from .denoise import denoise, init_normals
from .edge_zone import edge_zone_report
from .errors import RfepsError
from .mesh import TriangleMesh
from .metrics import full_report
from .rpd import compute_rpd, extract_dual, project_sites
from .synth import SyntheticSpec, make_synthetic


@dataclass
class StageTiming:
    t_denoise: float = 0.0
    t_edgezone: float = 0.0
    t_regularize: float = 0.0
    t_refine: float = 0.0
    t_generate: float = 0.0
    t_rpd: float = 0.0
    point_count: int = 0

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class PipelineResult:
    augmented: OrientedCloud          # original coordinate frame
    mesh: TriangleMesh                # None in consolidation-only mode
    timing: StageTiming
    delta: float                      # normalized-frame average gap
    report: object                    # edge-zone classifier report
    transform: object                 # normalization record
    manifest: dict


class StageError(RfepsError):
    def __init__(self, stage, original):
        super().__init__(f"stage {stage!r} failed: {original}")
        self.stage = stage
        self.original = original


def run_pipeline(cloud: OrientedCloud, base_mesh: TriangleMesh = None,
                 config: PipelineConfig = None, seed=0, stage="all",
                 dump_dir=None, use_weights=True) -> PipelineResult:
    """Execute the consolidation stages and, when a base mesh is given, the
    diagram-based meshing.

    All computation happens in the normalized frame; outputs are mapped back
    to the input frame.  ``stage`` limits execution depth (``denoise``,
    ``edges``, ``consolidate`` or ``all``); without a base mesh the run stops
    after augmentation (consolidation-only mode).
    """
    config = config or PipelineConfig()
    timing = StageTiming(point_count=len(cloud))
    dump_dir = Path(dump_dir) if dump_dir else None
    if dump_dir:
        dump_dir.mkdir(parents=True, exist_ok=True)

    cloud.validate()
    work, record = normalize(cloud)
    base = None
    if base_mesh is not None:
        base = TriangleMesh(record.apply(base_mesh.vertices),
                            base_mesh.triangles).drop_degenerate()

    delta = average_gap(work)
    r_query = build_index(work)

    # Stage 1: normal initialization + joint denoising.
    t0 = time.perf_counter()
    try:
        if config.normal_init == "pca":
            work, _ = init_normals(work, k=config.pca_k, query=r_query)
        work, _ = denoise(work, config, delta, query=r_query)
        r_query = build_index(work)
    except RfepsError as exc:
        raise StageError("denoise", exc) from exc
    timing.t_denoise = time.perf_counter() - t0
    if dump_dir:
        io.write_ply_cloud(dump_dir / "stage1_denoised.ply", _restore(work, record))
    if stage == "denoise":
        return _finish(cloud, work, None, None, timing, delta, None, record,
                       config, seed)

    # Stage 2: edge-zone classification.
    t0 = time.perf_counter()
    try:
        report = edge_zone_report(work, r_query, config, delta)
        work.labels = report.classification.copy()
    except RfepsError as exc:
        raise StageError("edge_zone", exc) from exc
    timing.t_edgezone = time.perf_counter() - t0
    if dump_dir:
        io.write_ply_cloud(dump_dir / "stage2_edges.ply", _restore(work, record))
    if stage == "edges":
        return _finish(cloud, work, None, None, timing, delta, report, record,
                       config, seed)

    edge_set = report.edge_zone_indices()

    # Stage 3: normal regularization on the edge zone.
    t0 = time.perf_counter()
    try:
        work.normals, _ = regularize_normals(work, edge_set, r_query, config,
                                             delta)
    except RfepsError as exc:
        raise StageError("regularize", exc) from exc
    timing.t_regularize = time.perf_counter() - t0

    # Stage 4: position refinement against similar-normal neighbors.
    t0 = time.perf_counter()
    try:
        work, _ = refine_positions(work, r_query, config, delta)
        r_query = build_index(work)
    except RfepsError as exc:
        raise StageError("refine", exc) from exc
    timing.t_refine = time.perf_counter() - t0

    # Stage 5: edge-point generation.
    t0 = time.perf_counter()
    try:
        projections = project_all(work, edge_set, r_query, config, delta)
        work = augment(work, projections, config, delta)
    except RfepsError as exc:
        raise StageError("generate", exc) from exc
    timing.t_generate = time.perf_counter() - t0
    if dump_dir:
        io.write_ply_cloud(dump_dir / "stage5_augmented.ply", _restore(work, record))
    if stage == "consolidate" or base is None:
        return _finish(cloud, work, None, None, timing, delta, report, record,
                       config, seed)

    # Stages 6-7: restricted power diagram and its dual.
    t0 = time.perf_counter()
    try:
        sites = project_sites(work, base)
        if not use_weights:
            for s in sites:
                s.weight = 0.0
        rpd = compute_rpd(sites, base)
        mesh, _ = extract_dual(rpd, work)
    except RfepsError as exc:
        raise StageError("rpd", exc) from exc
    timing.t_rpd = time.perf_counter() - t0

    out_mesh = TriangleMesh(record.invert(mesh.vertices), mesh.triangles)
    return _finish(cloud, work, out_mesh, rpd, timing, delta, report, record,
                   config, seed)


def _restore(work: OrientedCloud, record) -> OrientedCloud:
    out = work.copy()
    out.positions = record.invert(work.positions)
    out.weights = record.invert_weight(work.weights)
    return out


def _finish(cloud, work, mesh, rpd, timing, delta, report, record, config, seed):
    augmented = _restore(work, record)
    manifest = {
        "config": dataclasses.asdict(config),
        "seed": seed,
        "timing": timing.to_dict(),
        "delta_normalized": delta,
        "versions": _versions(),
    }
    return PipelineResult(augmented, mesh, timing, delta, report, record,
                          manifest)


def _versions():
    import numpy
    import scipy

    from . import __version__
    return {"rfeps": __version__, "numpy": numpy.__version__,
            "scipy": scipy.__version__}


def write_manifest(path, manifest, extra=None):
    data = dict(manifest)
    if extra:
        data.update(extra)
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# Parameter sensitivity sweeps
# ---------------------------------------------------------------------------

SWEEP_PARAMS = ("xi", "radius_mult", "mu")


def sweep(param, values, spec: SyntheticSpec, seed=0, config=None,
          n_samples=50000):
    """Reconstruction-metric ratios of parameter variations vs. the default.

    Returns a list of row dicts.  The run at the default value is computed
    once and referenced by every ratio, so its own row is exactly 1.0.
    """
    if param not in SWEEP_PARAMS:
        raise RfepsError(f"sweep parameter must be one of {SWEEP_PARAMS}")
    config = config or PipelineConfig()
    default_value = getattr(config, param)
    values = list(values)
    if default_value not in values:
        values.append(default_value)

    fixture = make_synthetic(spec, seed=seed)

    def run_with(value):
        cfg = dataclasses.replace(config, **{param: value})
        result = run_pipeline(fixture.cloud.copy(), fixture.base_mesh, cfg,
                              seed=seed)
        rep = full_report(result.mesh, fixture.gt_mesh,
                          n_samples=n_samples, seed=seed)
        return rep

    reports = {}
    for v in values:
        reports[v] = run_with(v)
    base = reports[default_value]

    rows = []
    for v in sorted(values):
        rep = reports[v]
        row = {"param": param, "value": v}
        for name in ("cd", "f1", "nc", "ecd", "ef1"):
            rv = getattr(rep, name)
            bv = getattr(base, name)
            if v == default_value:
                row[f"{name}_ratio"] = 1.0
            elif rv is None or bv in (None, 0):
                row[f"{name}_ratio"] = float("nan")
            else:
                row[f"{name}_ratio"] = rv / bv
        rows.append(row)
    return rows


def sweep_to_csv(rows, path):
    names = ["param", "value", "cd_ratio", "f1_ratio", "nc_ratio",
             "ecd_ratio", "ef1_ratio"]
    with open(path, "w") as fh:
        fh.write(",".join(names) + "\n")
        for row in rows:
            fh.write(",".join(str(row[n]) for n in names) + "\n")
