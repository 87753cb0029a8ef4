"""Command-line front end.

Subcommands cover the full workflow: synthetic panel generation, model
fitting and tuning, default-probability prediction, portfolio loss
simulation, frailty-surface export, metric evaluation, and the
expanding-window backtest harness.  Every command is a deterministic
function of its input files, configuration, and seeds; file writes are
atomic (temp file plus rename) so a crash never leaves half a file.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .covariance import CovarianceParams
from .models import (
    MODEL_KINDS,
    FittedModel,
    TreeTuning,
    default_tuning_grid,
    fit_boosted,
    fit_linear,
    tune_boosted,
)
from .panel import (
    FeatureSchema,
    _fmt_float,
    expanding_window_split,
    load_panel,
    panel_to_csv_text,
)
from .portfolio import empirical_quantile, realized_loss, simulate_losses, summarize
from .prediction import FRAILTY_MAP_HEADER, frailty_map, predict_default_probs
from .scoring import (
    BinSpec,
    crps_empirical,
    probability_metrics,
    quantile_loss,
    rmse,
)
from .synthetic import SynthConfig, generate_synthetic

METRICS_HEADER = ("model,period,auc,h_measure,log_loss,brier,ece,"
                  "crps,qloss99,rmse")
THETA_HEADER = "model,period,sigma2,rho_s,rho_t"
LOSSES_HEADER = "model,period,mean,q99,realized,n_sims,seed"
PREDICTIONS_HEADER = "loan_id,year,prob"


@dataclass
class RunConfig:
    """Merged view of config-file keys and command-line flags.

    Precedence: command-line flag > config file > default.  All seeds are
    explicit fields; nothing falls back to wall-clock entropy.
    """

    command: str
    panel: str = None
    schema: str = None
    model: str = None
    probs: str = None
    out_dir: str = "."
    kind: str = "boost-spacetime"
    kinds: list = None
    gp_mode: str = "spacetime"
    m: int = 20
    nodes: int = 20
    n_sims: int = 100_000
    alpha: float = 0.99
    seed: int = 0
    threads: int = 1
    first_test: int = None
    last_test: int = None
    tune: bool = False
    tuning: dict = None
    grid: list = None
    theta0: list = None
    fix_theta: list = None
    patience: int = 50
    theta_steps: int = 10
    periods: list = None
    grid_n: int = None
    synth: dict = None

    def require(self, *names):
        for name in names:
            if getattr(self, name) is None:
                raise SystemExit(f"error: missing required setting {name!r} "
                                 f"for command {self.command!r}")

    def input_path(self, name):
        path = Path(getattr(self, name))
        if not path.exists():
            raise SystemExit(f"error: {name} file not found: {path}")
        return path


_CONFIG_FIELDS = {f.name for f in dataclasses.fields(RunConfig)} - {"command"}


def _merge_config(command, args):
    values = {}
    cfg_path = getattr(args, "config", None)
    if cfg_path:
        with open(cfg_path, encoding="utf-8") as fh:
            loaded = json.load(fh)
        unknown = set(loaded) - _CONFIG_FIELDS
        if unknown:
            raise SystemExit(f"error: unknown config keys {sorted(unknown)}")
        values.update(loaded)
    for key, val in vars(args).items():
        if key in ("config", "func", "command"):
            continue
        values[key] = val
    return RunConfig(command=command, **values)


def _params_from(triple):
    if triple is None:
        return None
    vals = [float(v) for v in triple]
    if len(vals) == 2:
        return CovarianceParams(sigma2=vals[0], rho_s=vals[1])
    if len(vals) == 3:
        rho_t = vals[2] if vals[2] > 0 else None
        return CovarianceParams(sigma2=vals[0], rho_s=vals[1], rho_t=rho_t)
    raise SystemExit("error: covariance parameters need 2 or 3 values "
                     "(sigma2, rho_s[, rho_t])")


def atomic_write(path, text):
    """Write text then rename into place so readers never see a partial
    file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _json_ready(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, dict):
        return {k: _json_ready(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_ready(v) for v in obj]
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return _json_ready(dataclasses.asdict(obj))
    return obj


def _dump_json(payload):
    return json.dumps(_json_ready(payload), indent=2, sort_keys=True) + "\n"


def _csv_row(values):
    return ",".join(
        _fmt_float(v) if isinstance(v, float) else str(v) for v in values
    )


# ---------------------------------------------------------------- commands


def cmd_synth(cfg):
    out = Path(cfg.out_dir)
    opts = dict(cfg.synth or {})
    if "params" in opts:
        opts["params"] = _params_from(opts["params"])
    for key in ("box", "balance_range", "beta"):
        if key in opts and opts[key] is not None:
            opts[key] = tuple(opts[key])
    try:
        synth_cfg = SynthConfig(seed=cfg.seed, **opts)
        panel, truth = generate_synthetic(synth_cfg)
    except (TypeError, ValueError) as exc:
        raise SystemExit(f"error: {exc}") from None
    atomic_write(out / "panel.csv", panel_to_csv_text(panel))
    atomic_write(out / "schema.csv", panel.schema.to_text())
    atomic_write(out / "truth.json", _dump_json(truth))
    print(f"synth: wrote {panel.n_obs} rows for {synth_cfg.n_loans} loans "
          f"(gp_mode={synth_cfg.gp_mode}, fixed_effects={synth_cfg.fixed_effects}) "
          f"to {out}")
    return 0


def _fit_model(cfg, panel):
    theta0 = _params_from(cfg.theta0)
    fix_theta = _params_from(cfg.fix_theta)
    if cfg.kind == "boost-spacetime":
        tuning = TreeTuning(**cfg.tuning) if cfg.tuning else TreeTuning()
        model, trace = fit_boosted(
            panel, tuning, m=cfg.m, theta0=theta0, fix_theta=fix_theta,
            seed=cfg.seed, theta_steps=cfg.theta_steps, gp_mode=cfg.gp_mode,
        )
        return model, trace
    if cfg.kind in MODEL_KINDS:
        model = fit_linear(
            panel, cfg.kind, m=cfg.m, theta0=theta0, fix_theta=fix_theta,
            seed=cfg.seed, theta_steps=cfg.theta_steps,
        )
        return model, None
    raise SystemExit(f"error: unknown model kind {cfg.kind!r}")


def cmd_fit(cfg):
    cfg.require("panel", "schema")
    panel = load_panel(cfg.input_path("panel"), cfg.input_path("schema"))
    model, trace = _fit_model(cfg, panel)
    out = Path(cfg.out_dir)
    atomic_write(out / "model.json", _dump_json(model.to_dict()))
    if trace is not None and trace.objective:
        lines = ["iteration,objective,sigma2,rho_s,rho_t"]
        for i, (obj, th) in enumerate(zip(trace.objective, trace.theta), 1):
            lines.append(_csv_row([
                i, float(obj), float(th.sigma2), float(th.rho_s),
                float(th.rho_t) if th.rho_t is not None else "",
            ]))
        atomic_write(out / "fit_trace.csv", "\n".join(lines) + "\n")
    print(f"fit: {cfg.kind} on {panel.n_obs} rows -> {out / 'model.json'}")
    return 0


def _load_model_for(cfg, panel=None):
    model = FittedModel.load(cfg.input_path("model"))
    if panel is not None and list(model.schema.names) != list(panel.schema.names):
        raise SystemExit("error: model and panel schemas do not match")
    return model


def cmd_predict(cfg):
    cfg.require("panel", "schema", "model")
    panel = load_panel(cfg.input_path("panel"), cfg.input_path("schema"))
    model = _load_model_for(cfg, panel)
    probs = predict_default_probs(model, panel, nodes=cfg.nodes)
    lines = [PREDICTIONS_HEADER]
    for lid, yr, p in zip(panel.loan_id, panel.year, probs):
        lines.append(f"{lid},{yr},{_fmt_float(float(p))}")
    out = Path(cfg.out_dir) / "predictions.csv"
    atomic_write(out, "\n".join(lines) + "\n")
    print(f"predict: {probs.size} probabilities -> {out}")
    return 0


def cmd_portfolio(cfg):
    cfg.require("panel", "schema", "model")
    panel = load_panel(cfg.input_path("panel"), cfg.input_path("schema"))
    model = _load_model_for(cfg, panel)
    dist = simulate_losses(model, panel, n_sims=cfg.n_sims, seed=cfg.seed)
    summary = summarize(dist, alpha=cfg.alpha)
    summary["realized_loss"] = realized_loss(panel)
    out = Path(cfg.out_dir)
    lines = ["loss"] + [_fmt_float(float(x)) for x in dist.samples]
    atomic_write(out / "losses.csv", "\n".join(lines) + "\n")
    atomic_write(out / "loss_summary.json", _dump_json(summary))
    print(f"portfolio: {cfg.n_sims} simulations -> {out / 'losses.csv'} "
          f"(mean={summary['mean']:.2f}, q99={summary['q99']:.2f})")
    return 0


def cmd_frailty_map(cfg):
    cfg.require("model")
    model = _load_model_for(cfg)
    locations = None
    if cfg.grid_n is not None:
        pts = model.field.points
        gx = np.linspace(pts[:, 1].min(), pts[:, 1].max(), int(cfg.grid_n))
        gy = np.linspace(pts[:, 2].min(), pts[:, 2].max(), int(cfg.grid_n))
        xx, yy = np.meshgrid(gx, gy)
        locations = np.column_stack([xx.ravel(), yy.ravel()])
    periods = [float(p) for p in cfg.periods] if cfg.periods else None
    rows = frailty_map(model, periods=periods, locations=locations)
    lines = [FRAILTY_MAP_HEADER]
    for r in rows:
        lines.append(_csv_row([float(v) for v in r]))
    out = Path(cfg.out_dir) / "frailty_map.csv"
    atomic_write(out, "\n".join(lines) + "\n")
    print(f"frailty-map: {rows.shape[0]} rows -> {out}")
    return 0


def _read_predictions(path):
    text = Path(path).read_text(encoding="utf-8")
    lines = [ln for ln in text.splitlines() if ln]
    if not lines or lines[0] != PREDICTIONS_HEADER:
        raise SystemExit(f"error: {path} is not a predictions file "
                         f"(expected header {PREDICTIONS_HEADER!r})")
    table = {}
    for ln in lines[1:]:
        lid, yr, p = ln.split(",")
        table[(lid, int(yr))] = float(p)
    return table


def cmd_evaluate(cfg):
    cfg.require("panel", "schema", "probs")
    panel = load_panel(cfg.input_path("panel"), cfg.input_path("schema"))
    table = _read_predictions(cfg.input_path("probs"))
    probs = np.empty(panel.n_obs)
    for i, (lid, yr) in enumerate(zip(panel.loan_id, panel.year)):
        key = (str(lid), int(yr))
        if key not in table:
            raise SystemExit(f"error: no prediction for loan {lid} year {yr}")
        probs[i] = table[key]
    bins = BinSpec.from_pooled(probs)
    metrics = probability_metrics(probs, panel.default.astype(float), bins)
    out = Path(cfg.out_dir) / "metrics.json"
    atomic_write(out, _dump_json(metrics))
    print("evaluate: " + ", ".join(f"{k}={v:.4f}" for k, v in metrics.items()))
    return 0


# ---------------------------------------------------------------- backtest


def _window_seed(seed, test_period, salt):
    return int(np.random.SeedSequence([int(seed), int(test_period), salt])
               .generate_state(1)[0])


def _fit_window_kind(kind, cfg, train, inner, val, theta0, fix_theta, w_seed):
    if kind == "boost-spacetime":
        if cfg.tune or cfg.grid is not None:
            grid = ([TreeTuning(**g) for g in cfg.grid]
                    if cfg.grid is not None else default_tuning_grid())
            best, _ = tune_boosted(
                inner, val, grid=grid, m=cfg.m, theta0=theta0, seed=w_seed,
                patience=cfg.patience, theta_steps=cfg.theta_steps,
            )
        else:
            best = TreeTuning(**cfg.tuning) if cfg.tuning else TreeTuning()
        model, _ = fit_boosted(
            train, best, m=cfg.m, theta0=theta0, fix_theta=fix_theta,
            seed=w_seed, theta_steps=cfg.theta_steps, gp_mode=cfg.gp_mode,
        )
        return model
    return fit_linear(train, kind, m=cfg.m, theta0=theta0,
                      fix_theta=fix_theta, seed=w_seed,
                      theta_steps=cfg.theta_steps)


def _run_window(cfg, panel, window, kinds):
    """Fit every kind on the window's training years and score the test
    year.  Returns plain dicts so windows can run on worker threads."""
    tau = window.test_period
    train = panel.filter_periods(hi=window.train_end)
    test = panel.filter_periods(lo=tau, hi=tau)
    inner = panel.filter_periods(hi=window.inner_train_end)
    val = panel.filter_periods(lo=window.validation_period,
                               hi=window.validation_period)
    theta0 = _params_from(cfg.theta0)
    fix_theta = _params_from(cfg.fix_theta)
    realized = realized_loss(test)

    out = {}
    for kind in kinds:
        w_seed = _window_seed(cfg.seed, tau, kinds.index(kind))
        model = _fit_window_kind(kind, cfg, train, inner, val, theta0,
                                 fix_theta, w_seed)
        probs = predict_default_probs(model, test, nodes=cfg.nodes)
        dist = simulate_losses(model, test, n_sims=cfg.n_sims,
                               seed=_window_seed(cfg.seed, tau, 100))
        entry = {
            "probs": probs,
            "labels": test.default.astype(float),
            "loss_mean": float(dist.samples.mean()),
            "q99": empirical_quantile(dist.samples, 0.99),
            "crps": crps_empirical(dist.samples, realized),
            "realized": realized,
            "sim_seed": dist.seed,
        }
        if model.has_gp:
            entry["theta"] = model.params
            uniq = np.unique(
                np.column_stack([train.lon, train.lat]), axis=0)
            entry["map"] = frailty_map(model, periods=[float(tau)],
                                       locations=uniq)
        out[kind] = entry
    return out


def cmd_backtest(cfg):
    cfg.require("panel", "schema", "first_test")
    panel = load_panel(cfg.input_path("panel"), cfg.input_path("schema"))
    kinds = list(cfg.kinds) if cfg.kinds else list(MODEL_KINDS)
    for kind in kinds:
        if kind not in MODEL_KINDS:
            raise SystemExit(f"error: unknown model kind {kind!r}")
    try:
        windows = expanding_window_split(panel, cfg.first_test, cfg.last_test)
    except ValueError as exc:
        raise SystemExit(f"error: {exc}") from None

    results = {}
    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            futures = {w.test_period: pool.submit(_run_window, cfg, panel, w, kinds)
                       for w in windows}
            for tau, fut in futures.items():
                try:
                    results[tau] = fut.result()
                except Exception as exc:
                    raise SystemExit(
                        f"error: backtest window {tau} failed: {exc}") from exc
    else:
        for w in windows:
            try:
                results[w.test_period] = _run_window(cfg, panel, w, kinds)
            except Exception as exc:
                raise SystemExit(
                    f"error: backtest window {w.test_period} failed: {exc}"
                ) from exc

    taus = sorted(results)
    # calibration bins pool every model's and every year's test predictions
    pooled = np.concatenate([
        results[tau][kind]["probs"] for tau in taus for kind in kinds
    ])
    bins = BinSpec.from_pooled(pooled)

    metric_lines = [METRICS_HEADER]
    theta_lines = [THETA_HEADER]
    loss_lines = [LOSSES_HEADER]
    map_lines = ["model," + FRAILTY_MAP_HEADER]
    for kind in kinds:
        rows = []
        for tau in taus:
            e = results[tau][kind]
            row = probability_metrics(e["probs"], e["labels"], bins)
            row["crps"] = e["crps"]
            row["qloss99"] = quantile_loss(e["q99"], e["realized"], 0.99)
            row["rmse"] = rmse([e["loss_mean"]], [e["realized"]])
            rows.append(row)
            metric_lines.append(_csv_row(
                [kind, tau] + [float(row[k]) for k in
                               ("auc", "h_measure", "log_loss", "brier",
                                "ece", "crps", "qloss99", "rmse")]))
            if "theta" in e:
                th = e["theta"]
                theta_lines.append(_csv_row([
                    kind, tau, float(th.sigma2), float(th.rho_s),
                    float(th.rho_t) if th.rho_t is not None else "",
                ]))
                for r in e["map"]:
                    map_lines.append(kind + "," + _csv_row(
                        [float(v) for v in r]))
            loss_lines.append(_csv_row([
                kind, tau, e["loss_mean"], e["q99"], e["realized"],
                cfg.n_sims, e["sim_seed"],
            ]))
        avg = {k: float(np.mean([r[k] for r in rows]))
               for k in ("auc", "h_measure", "log_loss", "brier", "ece",
                         "crps", "qloss99")}
        # the averaged RMSE compares the mean-loss vector across windows
        avg["rmse"] = rmse([results[t][kind]["loss_mean"] for t in taus],
                           [results[t][kind]["realized"] for t in taus])
        metric_lines.append(_csv_row(
            [kind, "mean"] + [avg[k] for k in
                              ("auc", "h_measure", "log_loss", "brier",
                               "ece", "crps", "qloss99", "rmse")]))

    out = Path(cfg.out_dir)
    atomic_write(out / "metrics.csv", "\n".join(metric_lines) + "\n")
    atomic_write(out / "theta.csv", "\n".join(theta_lines) + "\n")
    atomic_write(out / "loss_summaries.csv", "\n".join(loss_lines) + "\n")
    atomic_write(out / "frailty_maps.csv", "\n".join(map_lines) + "\n")
    print(f"backtest: {len(taus)} windows x {len(kinds)} kinds -> {out}")
    return 0


# ---------------------------------------------------------------- parser


def _add_common(sp):
    sp.add_argument("--config", default=None,
                    help="JSON file of RunConfig keys; flags override it")
    sp.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    sp.add_argument("--out-dir", dest="out_dir", default=argparse.SUPPRESS)
    sp.add_argument("--threads", type=int, default=argparse.SUPPRESS)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="frailtyboost",
        description="Loan default risk with tree-boosted spatio-temporal "
                    "frailty models",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic loan panel")
    _add_common(sp)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("fit", help="fit one model kind")
    _add_common(sp)
    sp.add_argument("--panel", default=argparse.SUPPRESS)
    sp.add_argument("--schema", default=argparse.SUPPRESS)
    sp.add_argument("--kind", default=argparse.SUPPRESS,
                    choices=list(MODEL_KINDS))
    sp.add_argument("--m", type=int, default=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("predict", help="write default probabilities")
    _add_common(sp)
    sp.add_argument("--panel", default=argparse.SUPPRESS)
    sp.add_argument("--schema", default=argparse.SUPPRESS)
    sp.add_argument("--model", default=argparse.SUPPRESS)
    sp.add_argument("--nodes", type=int, default=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("portfolio", help="simulate portfolio losses")
    _add_common(sp)
    sp.add_argument("--panel", default=argparse.SUPPRESS)
    sp.add_argument("--schema", default=argparse.SUPPRESS)
    sp.add_argument("--model", default=argparse.SUPPRESS)
    sp.add_argument("--n-sims", dest="n_sims", type=int,
                    default=argparse.SUPPRESS)
    sp.add_argument("--alpha", type=float, default=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_portfolio)

    sp = sub.add_parser("frailty-map", help="export the latent surface")
    _add_common(sp)
    sp.add_argument("--model", default=argparse.SUPPRESS)
    sp.add_argument("--periods", nargs="+", type=float,
                    default=argparse.SUPPRESS)
    sp.add_argument("--grid-n", dest="grid_n", type=int,
                    default=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_frailty_map)

    sp = sub.add_parser("evaluate", help="score a predictions file")
    _add_common(sp)
    sp.add_argument("--panel", default=argparse.SUPPRESS)
    sp.add_argument("--schema", default=argparse.SUPPRESS)
    sp.add_argument("--probs", default=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("backtest", help="expanding-window evaluation")
    _add_common(sp)
    sp.add_argument("--panel", default=argparse.SUPPRESS)
    sp.add_argument("--schema", default=argparse.SUPPRESS)
    sp.add_argument("--first-test", dest="first_test", type=int,
                    default=argparse.SUPPRESS)
    sp.add_argument("--last-test", dest="last_test", type=int,
                    default=argparse.SUPPRESS)
    sp.add_argument("--kinds", nargs="+", default=argparse.SUPPRESS)
    sp.add_argument("--m", type=int, default=argparse.SUPPRESS)
    sp.add_argument("--n-sims", dest="n_sims", type=int,
                    default=argparse.SUPPRESS)
    sp.add_argument("--tune", action="store_true", default=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_backtest)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    cfg = _merge_config(args.command, args)
    func = args.func
    return func(cfg)


if __name__ == "__main__":
    sys.exit(main())
