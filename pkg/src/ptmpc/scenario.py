"""Scenario files: strict parsing, validation, and object construction.

A scenario is a single YAML document describing the plant, noise, safe
set, tube parameters, controller configuration, horizon, and Monte Carlo
settings. Validation is fail-closed: unknown keys are errors (a silent
typo in ``delta`` or the noise level would invalidate the certificate),
every error carries the offending key path, and all defaulted values are
echoed back so result manifests are self-contained.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import yaml

from .errors import ScenarioError
from .geometry import Box, SafeSet, disk, rect
from .mpc import (HeadingLevelController, MpcConfig, NormTerminalCost,
                  QuadraticCost, QuadraticTerminalCost, SolverConfig,
                  TerminalSet, WeightedL1Cost, ZeroInputController)
from .sim import NoiseModel
from .systems import LinearPlant, QuadrotorPlant, UnicyclePlant

_TOP_KEYS = {"name", "description", "plant", "input_set", "noise", "safe_set",
             "tube", "mpc", "horizon", "full_horizon", "initial_state",
             "monte_carlo", "corridor_pair"}
_PLANT_KEYS = {"kind", "step_size", "lipschitz", "stabilizer", "gain",
               "transform", "a", "b", "gravity", "arm_length", "inertia",
               "mass", "lipschitz_domain"}
_STAB_KEYS = {"k_v", "rho_v", "k_w", "c0", "k_h", "theta_ref"}
_NOISE_KEYS = {"kind", "level", "interpretation"}
_SAFE_KEYS = {"obstacles", "workspace", "workspace_dims"}
_OBS_KEYS = {"shape", "center", "radius", "lower", "upper", "dims"}
_TUBE_KEYS = {"delta", "epsilon", "delta_t"}
_MPC_KEYS = {"window", "terminal_set", "terminal_controller", "costs",
             "solver"}
_TSET_KEYS = {"center", "radius"}
_TCTRL_KEYS = {"kind", "k_level"}
_COST_KEYS = {"kind", "state_weight", "input_weight", "terminal_weight",
              "state_weights", "input_weights", "terminal_weights"}
_SOLVER_KEYS = {"max_iterations", "penalty_weight", "penalty_growth",
                "convergence_tol", "rel_improvement_tol", "min_iterations",
                "fd_step", "gradient_mode", "restoration", "step_init",
                "step_shrink", "armijo", "max_backtracks", "margin_buffer",
                "input_blocks", "replan_period"}
_MC_KEYS = {"runs", "base_seed", "parallelism", "subsample_traces",
            "safety_target"}


def _require_keys(mapping, allowed, required, path):
    if not isinstance(mapping, dict):
        raise ScenarioError("expected a mapping", path)
    for key in mapping:
        if key not in allowed:
            raise ScenarioError(f"unknown key {key!r}", path)
    for key in required:
        if key not in mapping:
            raise ScenarioError(f"missing required key {key!r}", path)


def _number(value, path, positive=False):
    if not isinstance(value, (int, float)) or isinstance(value, bool):
        raise ScenarioError("expected a number", path)
    if positive and not value > 0:
        raise ScenarioError("must be strictly positive", path)
    return float(value)


def _vector(value, path, length=None):
    if not isinstance(value, list) or \
            not all(isinstance(v, (int, float)) for v in value):
        raise ScenarioError("expected a list of numbers", path)
    if length is not None and len(value) != length:
        raise ScenarioError(f"expected length {length}", path)
    return [float(v) for v in value]


def load_scenario(path) -> dict:
    """Parse and validate a scenario file, returning the normalized dict."""
    text = Path(path).read_text()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ScenarioError(f"YAML parse error: {exc}") from exc
    if isinstance(raw, dict) and "scenario_echo" in raw:
        raw = raw["scenario_echo"]   # re-run from a result manifest
    return validate_scenario(raw)


def validate_scenario(raw) -> dict:
    """Validate a scenario mapping and fill defaults (echoed in output)."""
    _require_keys(raw, _TOP_KEYS,
                  {"plant", "input_set", "noise", "safe_set", "tube", "mpc",
                   "horizon", "initial_state", "monte_carlo"}, "scenario")
    out = {"name": raw.get("name", "unnamed"),
           "description": raw.get("description", "")}

    plant = dict(raw["plant"])
    _require_keys(plant, _PLANT_KEYS, {"kind"}, "plant")
    kind = plant["kind"]
    if kind not in ("unicycle", "quadrotor", "linear"):
        raise ScenarioError(f"unknown plant kind {kind!r}", "plant.kind")
    if kind == "unicycle":
        stab = dict(plant.get("stabilizer", {}))
        _require_keys(stab, _STAB_KEYS, set(), "plant.stabilizer")
        defaults = {"k_v": 0.3, "rho_v": 2.5, "k_w": 0.3, "c0": 1.5,
                    "k_h": 6.0, "theta_ref": 0.0}
        for key, val in defaults.items():
            stab.setdefault(key, val)
            stab[key] = _number(stab[key], f"plant.stabilizer.{key}")
        plant["stabilizer"] = stab
        plant.setdefault("step_size", 0.1)
        state_dim = 3
    elif kind == "quadrotor":
        for key, default in (("step_size", 0.001), ("gravity", 9.8),
                             ("arm_length", 0.25), ("inertia", 0.035),
                             ("mass", 0.141)):
            plant.setdefault(key, default)
            plant[key] = _number(plant[key], f"plant.{key}", positive=True)
        if "gain" not in plant:
            raise ScenarioError("quadrotor needs a 2x6 gain matrix",
                                "plant.gain")
        plant["gain"] = [_vector(row, "plant.gain", 6) for row in plant["gain"]]
        if len(plant["gain"]) != 2:
            raise ScenarioError("gain must have two rows", "plant.gain")
        tr = plant.get("transform", "identity")
        if tr != "identity":
            tr = [_vector(row, "plant.transform", 6) for row in tr]
            if len(tr) != 6:
                raise ScenarioError("transform must be 6x6", "plant.transform")
        plant["transform"] = tr
        state_dim = 6
    else:
        if "a" not in plant or "b" not in plant:
            raise ScenarioError("linear plant needs matrices a and b", "plant")
        a = [_vector(row, "plant.a") for row in plant["a"]]
        state_dim = len(a)
        plant["a"] = [_vector(row, "plant.a", state_dim) for row in plant["a"]]
        plant["b"] = [_vector(row, "plant.b") for row in plant["b"]]
    if "lipschitz" in plant:
        plant["lipschitz"] = _number(plant["lipschitz"], "plant.lipschitz")
    if "lipschitz_domain" in plant:
        dom = plant["lipschitz_domain"]
        _require_keys(dom, {"lower", "upper"}, {"lower", "upper"},
                      "plant.lipschitz_domain")
        dom["lower"] = _vector(dom["lower"], "plant.lipschitz_domain.lower",
                               state_dim)
        dom["upper"] = _vector(dom["upper"], "plant.lipschitz_domain.upper",
                               state_dim)
    out["plant"] = plant

    ibox = raw["input_set"]
    _require_keys(ibox, {"lower", "upper"}, {"lower", "upper"}, "input_set")
    lo = _vector(ibox["lower"], "input_set.lower")
    hi = _vector(ibox["upper"], "input_set.upper", len(lo))
    out["input_set"] = {"lower": lo, "upper": hi}

    noise = dict(raw["noise"])
    _require_keys(noise, _NOISE_KEYS, {"kind", "level"}, "noise")
    if noise["kind"] not in ("gaussian", "uniform_ball", "bounded", "zero"):
        raise ScenarioError(f"unknown noise kind {noise['kind']!r}",
                            "noise.kind")
    noise["level"] = _number(noise["level"], "noise.level")
    noise.setdefault("interpretation", "variance")
    if noise["interpretation"] not in ("variance", "std"):
        raise ScenarioError("interpretation must be 'variance' or 'std'",
                            "noise.interpretation")
    out["noise"] = noise

    safe = dict(raw["safe_set"])
    _require_keys(safe, _SAFE_KEYS, set(), "safe_set")
    obstacles = []
    for i, ob in enumerate(safe.get("obstacles") or []):
        _require_keys(ob, _OBS_KEYS, {"shape"}, f"safe_set.obstacles[{i}]")
        shape = ob["shape"]
        entry = {"shape": shape, "dims": ob.get("dims", [0, 1])}
        if shape == "disk":
            entry["center"] = _vector(ob["center"],
                                      f"safe_set.obstacles[{i}].center", 2)
            entry["radius"] = _number(ob["radius"],
                                      f"safe_set.obstacles[{i}].radius",
                                      positive=True)
        elif shape == "rect":
            entry["lower"] = _vector(ob["lower"],
                                     f"safe_set.obstacles[{i}].lower", 2)
            entry["upper"] = _vector(ob["upper"],
                                     f"safe_set.obstacles[{i}].upper", 2)
        else:
            raise ScenarioError(f"unknown obstacle shape {shape!r}",
                                f"safe_set.obstacles[{i}].shape")
        obstacles.append(entry)
    normalized_safe = {"obstacles": obstacles,
                       "workspace": safe.get("workspace"),
                       "workspace_dims": safe.get("workspace_dims")}
    if normalized_safe["workspace"] is not None:
        ws = normalized_safe["workspace"]
        _require_keys(ws, {"lower", "upper"}, {"lower", "upper"},
                      "safe_set.workspace")
    out["safe_set"] = normalized_safe

    tube = dict(raw["tube"])
    _require_keys(tube, _TUBE_KEYS, {"delta"}, "tube")
    tube["delta"] = _number(tube["delta"], "tube.delta", positive=True)
    if not tube["delta"] < 1.0:
        raise ScenarioError("delta must lie in (0, 1)", "tube.delta")
    tube.setdefault("epsilon", 0.7)
    tube.setdefault("delta_t", 1)
    if tube["epsilon"] != "optimize":
        tube["epsilon"] = _number(tube["epsilon"], "tube.epsilon")
    if tube["delta_t"] != "optimize" and not isinstance(tube["delta_t"], int):
        raise ScenarioError("delta_t must be an integer or 'optimize'",
                            "tube.delta_t")
    out["tube"] = tube

    mpc = dict(raw["mpc"])
    _require_keys(mpc, _MPC_KEYS,
                  {"window", "terminal_set", "terminal_controller", "costs"},
                  "mpc")
    if mpc["window"] != "full" and (not isinstance(mpc["window"], int)
                                    or mpc["window"] < 1):
        raise ScenarioError("window must be a positive integer or 'full'",
                            "mpc.window")
    tset = mpc["terminal_set"]
    _require_keys(tset, _TSET_KEYS, _TSET_KEYS, "mpc.terminal_set")
    tset["center"] = _vector(tset["center"], "mpc.terminal_set.center",
                             state_dim)
    tset["radius"] = _number(tset["radius"], "mpc.terminal_set.radius",
                             positive=True)
    tctrl = dict(mpc["terminal_controller"])
    _require_keys(tctrl, _TCTRL_KEYS, {"kind"}, "mpc.terminal_controller")
    if tctrl["kind"] not in ("zero", "heading_level"):
        raise ScenarioError("unknown terminal controller kind",
                            "mpc.terminal_controller.kind")
    tctrl.setdefault("k_level", 0.05)
    mpc["terminal_controller"] = tctrl
    costs = dict(mpc["costs"])
    _require_keys(costs, _COST_KEYS, {"kind"}, "mpc.costs")
    if costs["kind"] == "l1":
        costs.setdefault("state_weight", 1.0)
        costs.setdefault("input_weight", 0.1)
        costs.setdefault("terminal_weight", costs["state_weight"])
    elif costs["kind"] == "quadratic":
        for key in ("state_weights", "terminal_weights"):
            costs[key] = _vector(costs[key], f"mpc.costs.{key}", state_dim)
        costs["input_weights"] = _vector(costs["input_weights"],
                                         "mpc.costs.input_weights", len(lo))
    else:
        raise ScenarioError("cost kind must be 'l1' or 'quadratic'",
                            "mpc.costs.kind")
    mpc["costs"] = costs
    solver = dict(mpc.get("solver", {}))
    _require_keys(solver, _SOLVER_KEYS, set(), "mpc.solver")
    mpc["solver"] = solver
    out["mpc"] = mpc

    if not isinstance(raw["horizon"], int) or raw["horizon"] < 1:
        raise ScenarioError("horizon must be a positive integer", "horizon")
    out["horizon"] = raw["horizon"]
    if "full_horizon" in raw:
        if not isinstance(raw["full_horizon"], int) \
                or raw["full_horizon"] < raw["horizon"]:
            raise ScenarioError("full_horizon must be >= horizon",
                                "full_horizon")
        out["full_horizon"] = raw["full_horizon"]
    out["initial_state"] = _vector(raw["initial_state"], "initial_state",
                                   state_dim)

    mc = dict(raw["monte_carlo"])
    _require_keys(mc, _MC_KEYS, {"runs", "base_seed"}, "monte_carlo")
    if not isinstance(mc["runs"], int) or mc["runs"] < 1:
        raise ScenarioError("runs must be a positive integer",
                            "monte_carlo.runs")
    if not isinstance(mc["base_seed"], int):
        raise ScenarioError("base_seed must be an integer",
                            "monte_carlo.base_seed")
    mc.setdefault("parallelism", 0)
    mc.setdefault("subsample_traces", 10)
    if "safety_target" in mc:
        mc["safety_target"] = _number(mc["safety_target"],
                                      "monte_carlo.safety_target")
    out["monte_carlo"] = mc
    if "corridor_pair" in raw:
        pair = raw["corridor_pair"]
        if (not isinstance(pair, list) or len(pair) != 2
                or not all(isinstance(i, int) for i in pair)):
            raise ScenarioError("corridor_pair must be two obstacle indices",
                                "corridor_pair")
        out["corridor_pair"] = pair
    return out


# ----------------------------------------------------------------------
# Object construction
# ----------------------------------------------------------------------


def build_plant(scn: dict):
    spec = scn["plant"]
    box = Box(lower=scn["input_set"]["lower"], upper=scn["input_set"]["upper"])
    kind = spec["kind"]
    lips = spec.get("lipschitz")
    if kind == "unicycle":
        stab = spec["stabilizer"]
        return UnicyclePlant(input_set=box, step_size=spec["step_size"],
                             lipschitz=lips if lips is not None else 1.04,
                             **stab)
    if kind == "quadrotor":
        tr = spec["transform"]
        transform = np.eye(6) if tr == "identity" else np.asarray(tr)
        return QuadrotorPlant(input_set=box, gain=np.asarray(spec["gain"]),
                              transform=transform, step_size=spec["step_size"],
                              gravity=spec["gravity"],
                              arm_length=spec["arm_length"],
                              inertia=spec["inertia"], mass=spec["mass"],
                              lipschitz=lips if lips is not None else 1.05)
    plant = LinearPlant(a=np.asarray(spec["a"]), b=np.asarray(spec["b"]),
                        input_set=box)
    return plant


def build_safe_set(scn: dict) -> SafeSet:
    obstacles = []
    for entry in scn["safe_set"]["obstacles"]:
        dims = tuple(entry["dims"])
        if entry["shape"] == "disk":
            obstacles.append(disk(entry["center"], entry["radius"], dims))
        else:
            obstacles.append(rect(entry["lower"], entry["upper"], dims))
    ws = scn["safe_set"]["workspace"]
    workspace = None if ws is None else Box(lower=ws["lower"],
                                            upper=ws["upper"])
    wd = scn["safe_set"]["workspace_dims"]
    return SafeSet(obstacles=tuple(obstacles), workspace=workspace,
                   workspace_dims=tuple(wd) if wd else ())


def noise_sigma(scn: dict) -> float:
    level = scn["noise"]["level"]
    if scn["noise"]["kind"] == "zero":
        return 0.0
    if scn["noise"]["interpretation"] == "variance":
        return math.sqrt(level)
    return level


def build_noise(scn: dict) -> NoiseModel:
    kind = scn["noise"]["kind"]
    if kind == "zero":
        return NoiseModel("zero")
    return NoiseModel(kind, noise_sigma(scn))


def build_tube_params(scn: dict, plant, horizon: int):
    from .tube import TubeParams, optimize_tube_params

    tube = scn["tube"]
    sigma = noise_sigma(scn)
    if sigma == 0.0:
        sigma = 1e-12   # zero-noise runs keep a degenerate but valid tube
    eps = tube["epsilon"]
    dt = tube["delta_t"]
    params = TubeParams(sigma=sigma, lipschitz=plant.lipschitz,
                        state_dim=plant.state_dim, delta=tube["delta"],
                        horizon=horizon,
                        epsilon=0.7 if eps == "optimize" else eps,
                        delta_t=1 if dt == "optimize" else dt)
    if eps == "optimize" or dt == "optimize":
        eps_grid = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9) \
            if eps == "optimize" else (eps,)
        dt_grid = None if dt == "optimize" else (params.delta_t,)
        params = optimize_tube_params(params, epsilons=eps_grid,
                                      delta_ts=dt_grid)
    return params


def build_mpc_config(scn: dict, plant, horizon: int) -> MpcConfig:
    mpc = scn["mpc"]
    window = horizon if mpc["window"] == "full" else mpc["window"]
    tset = TerminalSet(center=mpc["terminal_set"]["center"],
                       radius=mpc["terminal_set"]["radius"])
    tc = mpc["terminal_controller"]
    if tc["kind"] == "zero":
        controller = ZeroInputController(plant.input_dim)
    else:
        controller = HeadingLevelController(plant=plant,
                                            k_level=tc["k_level"])
    costs = mpc["costs"]
    if costs["kind"] == "l1":
        stage = WeightedL1Cost(costs["state_weight"], costs["input_weight"])
        terminal = NormTerminalCost(costs["terminal_weight"])
    else:
        stage = QuadraticCost(q_diag=tuple(costs["state_weights"]),
                              r_diag=tuple(costs["input_weights"]))
        terminal = QuadraticTerminalCost(q_diag=tuple(costs["terminal_weights"]))
    solver = SolverConfig(**mpc["solver"])
    return MpcConfig(window=window, terminal_set=tset,
                     terminal_controller=controller, stage_cost=stage,
                     terminal_cost=terminal, solver=solver)
