"""Command-line client for the dynsurv service.

Every command builds a JSON request, sends it to the service (an in-process
ASGI app by default, or a remote server via --server), and writes the response
to the requested output files. File parsing/writing uses the package's CSV
schemas; all stochastic commands require an explicit --seed.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
"""

import argparse
import csv
import json
import math
import sys

import httpx

from .data import load_longitudinal_csv, load_survival_csv
from .errors import DataError

USAGE_EXIT = 2
DATA_EXIT = 3
NUMERICAL_EXIT = 4


class CliError(Exception):
    def __init__(self, message: str, exit_code: int):
        super().__init__(message)
        self.exit_code = exit_code


class _InProcessClient:
    """Synchronous facade over the ASGI app (httpx's ASGI transport is async)."""

    def __init__(self):
        from .service import create_app

        self._app = create_app()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False

    def post(self, path: str, json: dict):
        import asyncio

        async def go():
            transport = httpx.ASGITransport(app=self._app)
            async with httpx.AsyncClient(transport=transport,
                                         base_url="http://dynsurv.local",
                                         timeout=None) as client:
                return await client.post(path, json=json)

        return asyncio.run(go())


def _client(server: str | None):
    if server:
        return httpx.Client(base_url=server, timeout=None)
    return _InProcessClient()


def _post(client: httpx.Client, path: str, payload: dict) -> dict:
    response = client.post(path, json=payload)
    if response.status_code == 200:
        return response.json()
    try:
        detail = response.json()["detail"]
        code, message = detail["code"], detail["message"]
    except Exception:
        raise CliError(f"service error {response.status_code}: {response.text}",
                       NUMERICAL_EXIT) from None
    exit_code = {"data_error": DATA_EXIT, "usage_error": USAGE_EXIT,
                 "numerical_error": NUMERICAL_EXIT}.get(code, NUMERICAL_EXIT)
    raise CliError(message, exit_code)


# --- payload helpers ------------------------------------------------------------

def _apply_transform(values, transform: str):
    if transform == "none":
        return list(values)
    if transform == "sqrt":
        if any(v < 0 for v in values):
            raise CliError("sqrt transform requires non-negative marker values",
                           DATA_EXIT)
        return [math.sqrt(v) for v in values]
    if transform == "log":
        if any(v <= 0 for v in values):
            raise CliError("log transform requires positive marker values",
                           DATA_EXIT)
        return [math.log(v) for v in values]
    raise CliError(f"unknown transform {transform!r}", USAGE_EXIT)


def _dataset_payload(longitudinal_path, survival_path, transform: str) -> dict:
    try:
        observations = load_longitudinal_csv(longitudinal_path)
        records, covariate_names = load_survival_csv(survival_path)
    except DataError as exc:
        raise CliError(str(exc), DATA_EXIT) from exc
    values = _apply_transform([o.value for o in observations], transform)
    return {
        "longitudinal": [
            {"subject_id": o.subject_id, "time": o.time, "value": v}
            for o, v in zip(observations, values)
        ],
        "survival": [
            {
                "subject_id": r["subject_id"],
                "event_time": r["event_time"],
                "status": r["status"],
                "covariates": r["covariates"],
            }
            for r in records
        ],
        "covariate_names": list(covariate_names),
    }


def _write_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def _fmt(x) -> str:
    if x is None:
        return "NA"
    return repr(float(x))


def _load_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read JSON {path}: {exc}", DATA_EXIT) from exc


# --- commands -------------------------------------------------------------------

def cmd_simulate(args) -> int:
    with _client(args.server) as client:
        out = _post(client, "/simulate",
                    {"scenario": args.scenario, "n": args.n, "seed": args.seed})
    data = out["dataset"]
    _write_csv(
        args.out_longitudinal,
        ["subject_id", "time", "value"],
        [[r["subject_id"], _fmt(r["time"]), _fmt(r["value"])]
         for r in data["longitudinal"]],
    )
    names = data["covariate_names"]
    _write_csv(
        args.out_survival,
        ["subject_id", "event_time", "status", *names],
        [[r["subject_id"], _fmt(r["event_time"]), str(r["status"]),
          *[_fmt(r["covariates"][c]) for c in names]]
         for r in data["survival"]],
    )
    _write_json(args.out_truth, {"truth": out["truth"], "config": out["config"]})
    print(f"wrote {args.out_longitudinal}, {args.out_survival}, {args.out_truth}")
    return 0


def cmd_fit(args) -> int:
    payload = {
        "method": args.method,
        "form": args.form,
        "baseline": args.baseline,
        "landmark_time": args.landmark_time,
        "dataset": _dataset_payload(args.longitudinal, args.survival,
                                    args.transform),
        "options": {
            "boundary_knots": _parse_floats(args.boundary_knots, 2),
            "internal_knots": _parse_floats(args.internal_knots),
            "group_covariate": args.group_covariate,
            "gamma_covariates": (args.gamma_covariates.split(",")
                                 if args.gamma_covariates else None),
            "diagonal_d": args.diagonal_d,
            "gh_nodes": args.gh_nodes,
        },
    }
    if args.warm_start:
        payload["warm_start"] = _load_json(args.warm_start)["fit"]
    with _client(args.server) as client:
        out = _post(client, "/fit", payload)
    _write_json(args.out, {"fit": out["fit"], "config": out["config"]})
    print(f"fit written to {args.out}: loglik={out['loglik']:.6f} "
          f"converged={out['converged']}")
    return 0


def cmd_predict(args) -> int:
    try:
        observations = load_longitudinal_csv(args.history)
    except DataError as exc:
        raise CliError(str(exc), DATA_EXIT) from exc
    if not observations:
        raise CliError("history CSV contains no observations", DATA_EXIT)
    values = _apply_transform([o.value for o in observations], args.transform)
    covariates = {}
    for item in args.covariate or []:
        if "=" not in item:
            raise CliError(f"--covariate expects name=value, got {item!r}",
                           USAGE_EXIT)
        name, _, raw = item.partition("=")
        try:
            covariates[name] = float(raw)
        except ValueError:
            raise CliError(f"covariate {name!r} has non-numeric value {raw!r}",
                           DATA_EXIT) from None
    payload = {
        "fit": _load_json(args.fit)["fit"],
        "subject": {
            "covariates": covariates,
            "times": [o.time for o in observations],
            "values": values,
        },
        "landmark": args.landmark,
        "horizons": _parse_floats(args.horizons),
        "n_draws": args.n_draws,
        "seed": args.seed,
    }
    with _client(args.server) as client:
        out = _post(client, "/predict", payload)
    _write_csv(
        args.out_csv,
        ["u", "pi_hat", "lo", "hi"],
        [[_fmt(r["u"]), _fmt(r["pi_hat"]),
          "NA" if math.isnan(r["lo"]) else _fmt(r["lo"]),
          "NA" if math.isnan(r["hi"]) else _fmt(r["hi"])]
         for r in out["rows"]],
    )
    if args.out_json:
        _write_json(args.out_json, out)
    print(f"predictions written to {args.out_csv}")
    return 0


def cmd_evaluate(args) -> int:
    fits, names = [], []
    for item in args.fit:
        name, _, path = item.partition("=")
        if not path:
            name, path = f"M{len(fits)+1}", item
        fits.append(_load_json(path)["fit"])
        names.append(name)
    payload = {
        "dataset": _dataset_payload(args.longitudinal, args.survival,
                                    args.transform),
        "fits": fits,
        "model_names": names,
        "t": args.t,
        "u": args.u,
        "dt": args.dt,
        "t_max": args.t_max,
        "loss": args.loss,
        "n_draws": args.n_draws,
        "seed": args.seed,
    }
    with _client(args.server) as client:
        out = _post(client, "/evaluate", payload)
    rows = out["rows"]
    if len(names) == 2:
        rows = rows + _r2_rows(rows, names)
    _write_csv(
        args.out_csv,
        ["model", "metric", "t", "window", "value", "reason"],
        [[r["model"], r["metric"], _fmt(r["t"]), _fmt(r["window"]),
          _fmt(r["value"]), r.get("reason") or ""] for r in rows],
    )
    if args.out_json:
        _write_json(args.out_json, {"rows": rows, "config": out["config"]})
    print(f"metrics written to {args.out_csv}")
    return 0


def _r2_rows(rows, names) -> list[dict]:
    """Explained variation of the second (larger) model against the first."""
    out = []
    by_key = {(r["model"], r["metric"]): r["value"] for r in rows}
    for metric in ("pe", "ipe"):
        m1 = by_key.get((names[0], metric))
        m2 = by_key.get((names[1], metric))
        row = {"model": f"{names[1]}_vs_{names[0]}", "metric": f"r2_{metric}",
               "t": rows[0]["t"], "window": 0.0, "value": None, "reason": None}
        if m1 in (None, 0.0) or m2 is None:
            row["reason"] = "r2 undefined (missing or zero reference measure)"
        else:
            row["value"] = 1.0 - m2 / m1
        out.append(row)
    return out


def cmd_benchmark(args) -> int:
    payload = {
        "scenarios": args.scenarios.split(","),
        "replicates": args.replicates,
        "n_draws": args.n_draws,
        "seed": args.seed,
        "n_subjects": args.n,
        "models": args.models.split(",") if args.models else None,
        "workers": args.workers,
    }
    with _client(args.server) as client:
        out = _post(client, "/benchmark", payload)
    _write_csv(
        args.out_csv,
        ["scenario", "model", "replicate", "subject", "rmse"],
        [[r["scenario"], r["model"], str(r["replicate"]), r["subject"],
          _fmt(r["rmse"])] for r in out["rows"]],
    )
    _write_json(args.out_json, {"summary": out["summary"],
                                "config": out["config"]})
    print(f"benchmark written to {args.out_csv} and {args.out_json}")
    return 0


def cmd_calibrate(args) -> int:
    payload = {"scenario": args.scenario, "target": args.target,
               "n_pilot": args.n_pilot, "seed": args.seed}
    with _client(args.server) as client:
        out = _post(client, "/calibrate", payload)
    print(f"scenario {out['scenario']}: t_c = {out['t_c']:.3f}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    uvicorn.run("dynsurv.service:app", host=args.host, port=args.port)
    return 0


def _parse_floats(text: str, expect: int | None = None) -> list[float]:
    try:
        values = [float(x) for x in text.split(",") if x.strip() != ""]
    except ValueError:
        raise CliError(f"expected comma-separated numbers, got {text!r}",
                       USAGE_EXIT) from None
    if expect is not None and len(values) != expect:
        raise CliError(f"expected {expect} comma-separated numbers, got {text!r}",
                       USAGE_EXIT)
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dynsurv",
        description="Dynamic survival prediction: simulate, fit, predict, "
                    "evaluate, benchmark.",
    )
    parser.add_argument("--server", default=None,
                        help="URL of a running dynsurv service; default runs "
                             "the service in-process")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a scenario dataset")
    p.add_argument("--scenario", required=True)
    p.add_argument("--n", type=int, default=300)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out-longitudinal", required=True)
    p.add_argument("--out-survival", required=True)
    p.add_argument("--out-truth", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit a landmark or joint model")
    p.add_argument("--method", choices=["landmark", "joint"], required=True)
    p.add_argument("--form", required=True,
                   choices=["value", "value_slope", "area", "weighted_area",
                            "shared_re"])
    p.add_argument("--baseline", default="weibull",
                   choices=["weibull", "bspline", "breslow"])
    p.add_argument("--landmark-time", type=float, default=None)
    p.add_argument("--longitudinal", required=True)
    p.add_argument("--survival", required=True)
    p.add_argument("--group-covariate", default=None)
    p.add_argument("--gamma-covariates", default=None,
                   help="comma-separated covariate names for the hazard")
    p.add_argument("--boundary-knots", default="0,19")
    p.add_argument("--internal-knots", default="2.1,5.5")
    p.add_argument("--diagonal-d", action="store_true")
    p.add_argument("--gh-nodes", type=int, default=None)
    p.add_argument("--transform", default="none", choices=["none", "sqrt", "log"])
    p.add_argument("--warm-start", default=None,
                   help="fit JSON used as the optimizer starting point")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="dynamic prediction for a new subject")
    p.add_argument("--fit", required=True)
    p.add_argument("--history", required=True,
                   help="longitudinal CSV with the subject's marker history")
    p.add_argument("--landmark", type=float, required=True)
    p.add_argument("--horizons", required=True,
                   help="comma-separated horizon times (>= landmark)")
    p.add_argument("--covariate", action="append", default=[],
                   metavar="NAME=VALUE")
    p.add_argument("--n-draws", "--K", dest="n_draws", type=int, default=200)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--transform", default="none", choices=["none", "sqrt", "log"])
    p.add_argument("--out-csv", required=True)
    p.add_argument("--out-json", default=None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="discrimination/calibration table")
    p.add_argument("--longitudinal", required=True)
    p.add_argument("--survival", required=True)
    p.add_argument("--fit", action="append", required=True,
                   metavar="[NAME=]FIT_JSON")
    p.add_argument("--t", type=float, required=True)
    p.add_argument("--u", type=float, required=True)
    p.add_argument("--dt", type=float, default=2.0)
    p.add_argument("--t-max", type=float, default=15.0)
    p.add_argument("--loss", default="absolute", choices=["absolute", "square"])
    p.add_argument("--n-draws", "--K", dest="n_draws", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--transform", default="none", choices=["none", "sqrt", "log"])
    p.add_argument("--out-csv", required=True)
    p.add_argument("--out-json", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("benchmark", help="landmark-vs-joint RMSE benchmark")
    p.add_argument("--scenarios", required=True,
                   help="comma-separated scenario ids, e.g. I,II,III,IV")
    p.add_argument("--replicates", type=int, required=True)
    p.add_argument("--n", type=int, default=300)
    p.add_argument("--n-draws", "--K", dest="n_draws", type=int, default=200)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--models", default=None,
                   help="comma-separated subset of LM1,LM2,LM3,JM1,JM2,JM3,JM4")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out-csv", required=True)
    p.add_argument("--out-json", required=True)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("calibrate-censoring",
                       help="re-derive a scenario's uniform censoring bound")
    p.add_argument("--scenario", required=True)
    p.add_argument("--target", type=float, default=0.45)
    p.add_argument("--n-pilot", type=int, default=10000)
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_EXIT


if __name__ == "__main__":
    sys.exit(main())
