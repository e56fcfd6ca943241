import logging
import time
from datetime import datetime
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from homokin import boltzmann, hydro, meanfield, omd
from homokin.deformation import DeformationMatrix
from homokin.errors import ConfigError, GridMismatch, HomokinError
from homokin.exporter import CsvExporter
from homokin.measure import MAX_ASSIGNMENT_SIZE, EmpiricalMeasure, w1_exact, w1_sliced
from homokin.models import (
    ComparisonReport,
    DsmcConfig,
    ExperimentConfig,
    HydroState,
    Moments,
    RunManifest,
    ViscosityLaw,
)
from homokin.parser import DataParser
from homokin.rng import STREAM_INIT, STREAM_PERTURB, make_rng
from homokin.scheduler import run_parallel
from homokin.storage import (
    RunStorage,
    config_from_dict,
    config_hash,
    dump_config,
    load_config,
    package_versions,
    save_config,
)

logger = logging.getLogger(__name__)

__all__ = ["ArmSeries", "compare", "run", "load_config", "save_config", "config_hash", "config_template"]

MIN_OVERLAP = 0.5
RunOutput = Tuple[Dict[str, str], dict, Optional[bool]]


class ArmSeries:
    """比较的一路：标量时间序列，或（分布型）每个时刻一个经验测度"""

    def __init__(self, name: str, times, values=None, measures: Optional[List[EmpiricalMeasure]] = None, extra: Optional[dict] = None):
        self.name = name
        self.times = np.asarray(times, dtype=float)
        self.values = None if values is None else np.asarray(values, dtype=float)
        self.measures = measures
        self.extra = extra or {}

    @property
    def is_distribution(self) -> bool:
        return self.measures is not None

    @classmethod
    def from_moments(cls, name: str, series: Sequence[Moments], quantity: str = "theta", **kwargs) -> "ArmSeries":
        return cls(name, [m.t for m in series], [moment_quantity(m, quantity) for m in series], **kwargs)

    @classmethod
    def from_hydro(cls, name: str, series: Sequence[HydroState], quantity: str = "theta", **kwargs) -> "ArmSeries":
        return cls.from_moments(name, hydro.moments_from_hydro(series), quantity, **kwargs)


def moment_quantity(m: Moments, quantity: str) -> float:
    if quantity == "P12":
        return m.P[0][1]
    if quantity in ("theta", "rho", "e"):
        return getattr(m, quantity)
    raise ValueError(f"unknown quantity: {quantity}")


def _w1(mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> float:
    if mu.n == nu.n and mu.n <= MAX_ASSIGNMENT_SIZE and mu.is_uniform() and nu.is_uniform():
        return w1_exact(mu, nu)
    return w1_sliced(mu, nu)


def compare(
    arm_a: ArmSeries,
    arm_b: ArmSeries,
    metric: str = "sup_rel_dev",
    tolerance: float = 0.1,
    quantity: Optional[str] = None,
) -> ComparisonReport:
    if metric == "W1":
        if not (arm_a.is_distribution and arm_b.is_distribution):
            raise ValueError("W1 comparison needs distributional arms")
        times, devs = [], []
        for i, t in enumerate(arm_a.times):
            match = np.nonzero(np.abs(arm_b.times - t) <= 1e-9 * max(1.0, abs(t)))[0]
            if match.size:
                times.append(float(t))
                devs.append(_w1(arm_a.measures[i], arm_b.measures[match[0]]))
        if not times:
            raise GridMismatch(f"arms {arm_a.name} and {arm_b.name} share no sample times")
    elif metric == "sup_rel_dev":
        if arm_a.values is None or arm_b.values is None:
            raise ValueError("sup_rel_dev needs scalar arms")
        ta, tb = arm_a.times, arm_b.times
        lo, hi = max(ta[0], tb[0]), min(ta[-1], tb[-1])
        overlap = hi - lo
        for arm in (arm_a, arm_b):
            span = arm.times[-1] - arm.times[0]
            if overlap < 0 or (span > 0 and overlap / span < MIN_OVERLAP):
                raise GridMismatch(f"time overlap of {arm_a.name} and {arm_b.name} is below {MIN_OVERLAP:.0%} of {arm.name}")
        tiny = 1e-12 * max(1.0, abs(hi))
        mask = (ta >= lo - tiny) & (ta <= hi + tiny)
        b_interp = np.interp(ta[mask], tb, arm_b.values)
        dev = np.abs(arm_a.values[mask] - b_interp) / np.maximum(np.abs(b_interp), 1e-300)
        times, devs = ta[mask].tolist(), dev.tolist()
    else:
        raise ValueError(f"unknown metric: {metric}")
    max_dev = float(max(devs))
    return ComparisonReport(
        arms=[arm_a.name, arm_b.name],
        metric=metric,
        quantity=quantity,
        max_deviation=max_dev,
        tolerance=tolerance,
        passed=max_dev <= tolerance,
        times=[float(t) for t in times],
        deviations=[float(d) for d in devs],
    )


# ---------- level runners ----------

def _sample_steps(config: ExperimentConfig) -> List[int]:
    n_steps = int(round(config.horizon / config.dt))
    steps = list(range(0, n_steps + 1, config.stride))
    if steps[-1] != n_steps:
        steps.append(n_steps)
    return steps


def _potential(cfg) -> Optional[omd.PairPotential]:
    return omd.PairPotential.from_config(cfg) if cfg is not None else None


def _run_omd(config: ExperimentConfig, max_workers: int = 1) -> RunOutput:
    cfg = config.omd
    deformation = config.deformation.build()
    seed = config.seeds[0]
    pot = _potential(cfg.potential)
    if cfg.lattice is None:
        lat = omd.LatticeSpec.empty()
    else:
        basis = cfg.lattice.basis if cfg.lattice.basis is not None else cfg.box * np.eye(3)
        lat = omd.LatticeSpec.cube(cfg.lattice.extent, basis=basis)
    scaling = {
        "unit": omd.Scaling.unit(),
        "mean_field": omd.Scaling.mean_field(),
        "boltzmann": omd.Scaling.boltzmann(cfg.epsilon),
    }[cfg.scaling]

    if cfg.initial_csv:
        x, w = DataParser.read_particles(cfg.initial_csv)
        system = omd.ParticleSystem(x, w, 0.0, deformation)
    else:
        rng = make_rng(seed, STREAM_INIT)
        x = rng.uniform(0.0, cfg.box, size=(cfg.n_particles, 3))
        v = np.sqrt(cfg.theta0) * rng.standard_normal((cfg.n_particles, 3))
        system = omd.ParticleSystem.from_velocities(x, v, 0.0, deformation)

    snapshots = omd.run(system, pot, lat, config.dt, config.horizon, scaling, stride=config.stride)
    files = {
        "trajectory.csv": CsvExporter.trajectory([s.t for s in snapshots], [s.x for s in snapshots], [s.w for s in snapshots]),
        "energy.csv": CsvExporter.table(["t", "energy"], [[s.t, omd.energy(s, pot, lat, scaling)] for s in snapshots]),
    }
    summary = {"n_particles": system.n, "n_images": len(lat), "scaling": cfg.scaling}
    if cfg.verify_particle is not None:
        deviation = omd.verify_indistinguishability(
            system, pot, lat, config.dt, config.horizon, scaling, particle=cfg.verify_particle, nu=cfg.verify_nu
        )
        summary["indistinguishability_deviation"] = deviation
        logger.info(f"image deviation over the horizon: {deviation:.3e}")
    return files, summary, None


def _run_meanfield(config: ExperimentConfig, max_workers: int = 1) -> RunOutput:
    cfg = config.meanfield
    deformation = config.deformation.build()
    pot = _potential(cfg.potential)
    sampler = meanfield.gaussian_sampler(cfg.initial.x_std, cfg.initial.w_std)
    steps = _sample_steps(config)

    if cfg.mode == "evolve":
        if cfg.initial_csv:
            g0 = DataParser.read_measure(cfg.initial_csv)
        else:
            g0 = sampler(make_rng(config.seeds[0], STREAM_INIT), cfg.n_particles)
        times, snaps = meanfield.evolve_particles(
            g0, deformation, pot, config.dt, config.horizon, [k * config.dt for k in steps]
        )
        path = meanfield.MeasurePath.from_snapshots(times, snaps)
        report = meanfield.field_hypotheses(deformation, pot, path, float(times[-1] - times[0]), seed=config.seeds[0])
        files = {"trajectory.csv": CsvExporter.trajectory(times, [m.x for m in snaps], [m.w for m in snaps])}
        return files, {"field_hypotheses": report.model_dump()}, None

    if cfg.mode == "stability":
        n_samples = max(1, len(steps) - 1)

        def member(seed: int):
            g0 = sampler(make_rng(seed, STREAM_INIT), cfg.n_particles)
            noise = make_rng(seed, STREAM_PERTURB).standard_normal(g0.points.shape)
            h0 = EmpiricalMeasure(g0.points + cfg.perturbation * noise)
            return meanfield.stability_check(
                g0, h0, deformation, pot, config.dt, config.horizon,
                n_samples=n_samples, tolerance=cfg.tolerance, seed=seed,
            )

        reports = run_parallel(member, list(config.seeds), max_workers)
        rows = [[seed, t, w, b] for seed, r in zip(config.seeds, reports) for t, w, b in zip(r.times, r.w1, r.bound)]
        violations = sum(r.violation for r in reports)
        summary = {
            "ratio_max": {str(seed): r.ratio_max for seed, r in zip(config.seeds, reports)},
            "L": {str(seed): r.L for seed, r in zip(config.seeds, reports)},
            "violations": violations,
        }
        return {"stability.csv": CsvExporter.table(["seed", "t", "W1", "bound"], rows)}, summary, violations == 0

    table = meanfield.convergence_study(
        sampler, cfg.n_list, cfg.t_eval if cfg.t_eval is not None else config.horizon, deformation, pot,
        seeds=config.seeds, dt=config.dt, reference=cfg.reference, metric=cfg.metric, n_projections=cfg.n_projections,
        max_workers=max_workers,
    )
    summary = table.model_dump(exclude={"rows"})
    return {"convergence.csv": CsvExporter.convergence(table)}, summary, table.slope < 0


def initial_ensemble(cfg: DsmcConfig, seed: int) -> boltzmann.VelocityEnsemble:
    if cfg.covariance is None:
        cov = cfg.theta0 * np.eye(3)
    elif len(cfg.covariance) == 3:
        cov = np.diag(cfg.covariance)
    elif len(cfg.covariance) == 9:
        cov = np.asarray(cfg.covariance, dtype=float).reshape(3, 3)
    else:
        raise ConfigError("dsmc.covariance needs 3 (diagonal) or 9 values")
    return boltzmann.VelocityEnsemble.gaussian(cfg.n_sim, cov, rho=cfg.rho0, seed=seed)


def _dsmc_series(config: ExperimentConfig, deformation: DeformationMatrix, seed: int) -> List[Moments]:
    cfg = config.dsmc
    return boltzmann.run_homoenergetic(
        initial_ensemble(cfg, seed), deformation, cfg.kernel, config.dt, config.horizon,
        stride=config.stride, collisions=cfg.collisions,
    )


def _run_dsmc(config: ExperimentConfig, max_workers: int = 1) -> RunOutput:
    cfg = config.dsmc
    deformation = config.deformation.build()
    seeds = list(config.seeds)
    all_series = run_parallel(lambda seed: _dsmc_series(config, deformation, seed), seeds, max_workers)

    files = {}
    for seed, series in zip(seeds, all_series):
        name = "moments.csv" if len(seeds) == 1 else f"moments_seed{seed}.csv"
        files[name] = CsvExporter.moments(series)
    summary = {
        "metadata": {
            "seeds": seeds,
            "kernel": cfg.kernel.model_dump(),
            "dt": config.dt,
            "epsilon": cfg.kernel.knudsen,
            "n_sim": cfg.n_sim,
        }
    }
    try:
        residual = hydro.conservation_residual(all_series[0], deformation)
        files["residual.csv"] = CsvExporter.residual(residual)
        summary["residual"] = {"max_r1": residual.max_r1, "max_r3": residual.max_r3, "scale": residual.scale}
    except ValueError as e:
        logger.warning(f"conservation residual skipped: {e}")

    passed = None
    if cfg.selfsimilar:
        report = boltzmann.selfsimilar_diagnostic(all_series[0], require_growth=cfg.require_growth)
        summary["selfsimilar"] = report.model_dump()
        passed = report.self_similar
    return files, summary, passed


def _run_hydro(config: ExperimentConfig, max_workers: int = 1) -> RunOutput:
    cfg = config.hydro
    deformation = config.deformation.build()
    state = HydroState(rho=cfg.rho0, theta=cfg.theta0, t=0.0)
    if cfg.model == "euler":
        series = hydro.euler_solve(state, deformation, config.dt, config.horizon, config.stride)
    else:
        series = hydro.navier_stokes_solve(state, deformation, cfg.viscosity, config.dt, config.horizon, config.stride)
    summary = {"model": cfg.model, "theta_final": series[-1].theta, "rho_final": series[-1].rho}
    return {"hydro.csv": CsvExporter.hydro(series)}, summary, None


def _distribution_arm(config: ExperimentConfig, deformation: DeformationMatrix, name: str, quantity: str) -> ArmSeries:
    cfg = config.dsmc
    ens = initial_ensemble(cfg, config.seeds[0])
    zeros = np.zeros_like(ens.w)
    cloud = EmpiricalMeasure.from_arrays(zeros, ens.w)
    steps = _sample_steps(config)
    times, measures, values = [], [], []
    current = ens
    done = 0
    for k in steps:
        t = k * config.dt
        if name == "transport":
            w = meanfield.exact_transport(cloud, deformation, t).w
            rho = cfg.rho0 * deformation.detI_tA(0.0) / deformation.detI_tA(t)
            state = boltzmann.VelocityEnsemble(w, rho, t=t)
        else:
            while done < k:
                current = boltzmann.deformation_substep(current, deformation, config.dt)
                done += 1
            state = current
        times.append(t)
        measures.append(EmpiricalMeasure.from_arrays(zeros, state.w))
        values.append(moment_quantity(boltzmann.moments(state), quantity))
    return ArmSeries(name, times, values, measures)


def _build_arm(config: ExperimentConfig, name: str, deformation: DeformationMatrix) -> ArmSeries:
    quantity = config.compare.quantity
    if name == "dsmc":
        return ArmSeries.from_moments(name, _dsmc_series(config, deformation, config.seeds[0]), quantity)
    if name == "bgk":
        cfg = config.dsmc
        m0 = boltzmann.moments(initial_ensemble(cfg, config.seeds[0]))
        nu = boltzmann.effective_relaxation_rate(cfg.kernel, cfg.rho0, cfg.theta0)
        series = boltzmann.bgk_moment_oracle(m0, deformation, nu, config.dt, config.horizon, config.stride)
        return ArmSeries.from_moments(name, series, quantity, extra={"nu": nu})
    if name in ("euler", "navier_stokes"):
        cfg = config.hydro
        state = HydroState(rho=cfg.rho0, theta=cfg.theta0)
        if name == "euler":
            series = hydro.euler_solve(state, deformation, config.dt, config.horizon, config.stride)
        else:
            series = hydro.navier_stokes_solve(state, deformation, cfg.viscosity, config.dt, config.horizon, config.stride)
        return ArmSeries.from_hydro(name, series, quantity)
    if name == "navier_stokes_calibrated":
        cc = config.compare
        cfg = config.dsmc
        cal_values = cc.calibration_A if cc.calibration_A is not None else (0.5 * deformation.A).reshape(-1).tolist()
        cal_deformation = DeformationMatrix.from_config(cal_values)
        training = _dsmc_series(config, cal_deformation, config.seeds[0])
        calibration = hydro.calibrate_viscosity(training, cal_deformation, cc.calibration_omega, cfg.kernel.knudsen)
        visc = ViscosityLaw(mu0=calibration.mu0_hat, omega_exp=cc.calibration_omega, epsilon=cfg.kernel.knudsen)
        first = training[0]
        state = HydroState(rho=first.rho, theta=first.theta)
        series = hydro.navier_stokes_solve(state, deformation, visc, config.dt, config.horizon, config.stride)
        return ArmSeries.from_hydro(name, series, quantity, extra={"calibration": calibration.model_dump()})
    if name in ("transport", "deformation"):
        return _distribution_arm(config, deformation, name, quantity)
    raise ConfigError(f"unknown arm: {name}")


def _run_compare(config: ExperimentConfig, max_workers: int = 1) -> RunOutput:
    cc = config.compare
    deformation = config.deformation.build()
    arm_a = _build_arm(config, cc.arm_a, deformation)
    arm_b = _build_arm(config, cc.arm_b, deformation)
    if cc.metric == "W1" and not (arm_a.is_distribution and arm_b.is_distribution):
        raise ConfigError("metric W1 is only available for the transport and deformation arms")
    report = compare(arm_a, arm_b, cc.metric, cc.tolerance, cc.quantity)
    report.config_hash = config_hash(config)
    report.seeds = list(config.seeds)

    files = {"comparison.csv": CsvExporter.table(["t", "deviation"], zip(report.times, report.deviations))}
    for label, arm in (("arm_a", arm_a), ("arm_b", arm_b)):
        if arm.values is not None:
            files[f"{label}_{arm.name}.csv"] = CsvExporter.table(["t", cc.quantity], zip(arm.times, arm.values))
    summary = {"comparison": report.model_dump(exclude={"times", "deviations"})}
    for arm in (arm_a, arm_b):
        if arm.extra:
            summary[arm.name] = arm.extra
    logger.info(f"compare {arm_a.name} vs {arm_b.name}: max deviation {report.max_deviation:.4g} (tolerance {report.tolerance})")
    return files, summary, report.passed


RUNNERS: Dict[str, Callable[..., RunOutput]] = {
    "omd": _run_omd,
    "meanfield": _run_meanfield,
    "dsmc": _run_dsmc,
    "hydro": _run_hydro,
    "compare": _run_compare,
}


def default_run_id(config: ExperimentConfig) -> str:
    return f"{config.level}-{config_hash(config)[:12]}"


def run(
    config: ExperimentConfig,
    storage: Optional[RunStorage] = None,
    run_id: Optional[str] = None,
    max_workers: int = 1,
) -> RunManifest:
    """按 level 分派，写出 CSV/JSON 与 manifest.json"""
    if storage is None:
        out = Path(config.output_dir)
        storage = RunStorage(str(out.parent))
        run_id = run_id or out.name
    run_id = run_id or default_run_id(config)
    started = datetime.now()
    clock = time.perf_counter()
    logger.info(f"Run {run_id} started: level={config.level}, seeds={config.seeds}")

    try:
        files, summary, passed = RUNNERS[config.level](config, max_workers)
    except HomokinError as e:
        raise type(e)(f"{config.level} run {run_id}: {e}") from e

    for name, content in files.items():
        storage.write_file(run_id, name, content)
    storage.write_file(run_id, "config.yaml", dump_config(config))
    storage.save_json(run_id, "summary.json", summary)

    manifest = RunManifest(
        run_id=run_id,
        level=config.level,
        status="finished",
        config_hash=config_hash(config),
        seeds=list(config.seeds),
        versions=package_versions(),
        started_at=started.isoformat(),
        finished_at=datetime.now().isoformat(),
        wall_time=time.perf_counter() - clock,
        files=sorted(list(files) + ["config.yaml", "summary.json"]),
        passed=passed,
    )
    storage.save_manifest(manifest)
    logger.info(f"Run {run_id} finished in {manifest.wall_time:.2f}s, passed={passed}")
    return manifest


TEMPLATES = {
    "omd": {
        "level": "omd",
        "deformation": {"A": [0, 1, 0, 0, 0, 0, 0, 0, 0]},
        "dt": 0.001, "horizon": 1.0, "stride": 100, "seeds": [1], "output_dir": "runs/omd",
        "omd": {"n_particles": 2, "box": 2.0, "potential": {"kind": "harmonic", "k": 1.0, "r0": 0.5, "cutoff": 1.5},
                "lattice": {"extent": 1}, "verify_particle": 0},
    },
    "meanfield": {
        "level": "meanfield",
        "deformation": {"A": [0, 1, 0, 0, 0, 0, 0, 0, 0]},
        "dt": 0.01, "horizon": 1.0, "stride": 10, "seeds": [1, 2, 3], "output_dir": "runs/meanfield",
        "meanfield": {"mode": "stability", "n_particles": 256, "potential": {"kind": "harmonic", "k": 1.0}},
    },
    "dsmc": {
        "level": "dsmc",
        "deformation": {"A": [0, 0.5, 0, 0, 0, 0, 0, 0, 0]},
        "dt": 0.05, "horizon": 5.0, "stride": 2, "seeds": [1], "output_dir": "runs/dsmc",
        "dsmc": {"n_sim": 10000, "kernel": {"kind": "maxwell", "b0": 1.0, "knudsen": 0.5}},
    },
    "hydro": {
        "level": "hydro",
        "deformation": {"A": [0, 1, 0, 0, 0, 0, 0, 0, 0]},
        "dt": 0.001, "horizon": 1.0, "stride": 10, "seeds": [0], "output_dir": "runs/hydro",
        "hydro": {"model": "navier_stokes", "viscosity": {"mu0": 1.0, "omega_exp": 1.0, "epsilon": 0.1}},
    },
    "compare": {
        "level": "compare",
        "deformation": {"A": [0, 1, 0, 0, 0, 0, 0, 0, 0]},
        "dt": 0.001, "horizon": 1.0, "stride": 10, "seeds": [0], "output_dir": "runs/compare",
        "hydro": {"model": "navier_stokes", "viscosity": {"mu0": 1.0, "omega_exp": 1.0, "epsilon": 0.1}},
        "compare": {"arm_a": "navier_stokes", "arm_b": "euler", "metric": "sup_rel_dev", "tolerance": 0.2},
    },
}


def config_template(level: str) -> ExperimentConfig:
    if level not in TEMPLATES:
        raise ConfigError(f"no template for level '{level}'")
    return config_from_dict(TEMPLATES[level])
