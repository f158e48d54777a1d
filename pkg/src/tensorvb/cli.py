"""Command-line interface: ``tensorvb fit | eval | bench | convert | synth | replay``.

Exit codes: 0 success, 1 parse or validation failure, 2 numeric failure.
Every option can also be set through an environment variable named
``TENSORVB_<COMMAND>_<OPTION>``, e.g. ``TENSORVB_FIT_ALGO=vb``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import click
import numpy as np

from . import __version__
from .errors import NumericError, TensorVBError
from .evaluation import SplitSpec, link_prediction_eval, make_split, report_row, rmse, write_report
from .io import atomic_write, format_coo, read_coo, write_factor, write_json
from .model import ModelSpec, PriorSpec, cp_model, load_model_spec
from .solvers import ALGORITHMS, SolverConfig, fit, predict
from .synth import SynthSpec, generate_cp_data, sample_heldout


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load_model(path) -> ModelSpec:
    try:
        return load_model_spec(path)
    except OSError as e:
        raise click.UsageError(f"{path}: cannot read model file: {e.strerror}") from None


def _bind_data(spec: ModelSpec, data) -> dict:
    """Map DATA arguments (positional or NAME=PATH) onto observation names."""
    names = spec.observation_names
    paths = {}
    positional = [d for d in data if "=" not in d]
    for d in data:
        if "=" in d:
            name, _, p = d.partition("=")
            if name not in names:
                raise click.UsageError(f"{d}: model has no observation {name!r}")
            paths[name] = p
    free = [n for n in names if n not in paths]
    if len(positional) > len(free):
        raise click.UsageError(f"{len(data)} data files for {len(names)} observations")
    paths.update(zip(free, positional))
    missing = [n for n in names if n not in paths]
    if missing:
        raise click.UsageError(f"no data file for observation(s) {', '.join(missing)}")
    return {n: paths[n] for n in names}


def _read_observations(spec: ModelSpec, paths: dict) -> dict:
    obs = {}
    for name, p in paths.items():
        t = read_coo(p)
        o = spec.observation(name)
        if t.indices != o.indices or t.shape != spec.observation_shape(name):
            raise click.UsageError(
                f"{p}: data over {dict(zip(t.indices, t.shape))}, observation {name} expects "
                f"{dict(zip(o.indices, spec.observation_shape(name)))}"
            )
        obs[name] = t
    return obs


def _apply_prior(spec: ModelSpec, A, B) -> ModelSpec:
    if A is None and B is None:
        return spec
    return spec.with_priors({
        f.name: PriorSpec(f.prior.A if A is None else A, f.prior.B if B is None else B) for f in spec.factors
    })


def _write_csv(path, header, rows):
    import io

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    atomic_write(path, buf.getvalue())


def _manifest(command, args, inputs, out: Path, outputs):
    return {
        "tool": "tensorvb",
        "version": __version__,
        "command": command,
        "args": args,
        "inputs": {k: {"path": str(Path(p).resolve()), "sha256": _sha256(p)} for k, p in inputs.items()},
        "outputs": {name: _sha256(out / name) for name in sorted(outputs)},
    }


@click.group(context_settings={"auto_envvar_prefix": "TENSORVB", "help_option_names": ["-h", "--help"]})
@click.version_option(__version__, prog_name="tensorvb")
def cli():
    """Sparse nonnegative tensor factorization with EM, MAP-EM and variational Bayes."""


_algo = click.option("--algo", type=click.Choice(ALGORITHMS), default="vb", show_default=True)
_iters = click.option("--iters", type=click.IntRange(min=1), default=200, show_default=True)
_tol = click.option("--tol", type=float, default=1e-6, show_default=True)
_seed = click.option("--seed", type=int, default=0, show_default=True)
_A = click.option("--A", "A", type=float, default=None, help="Prior shape for every factor.")
_B = click.option("--B", "B", type=float, default=None, help="Prior mean for every factor.")


# fit -----------------------------------------------------------------------

def _run_fit(model, data, algo, iters, tol, seed, A, B, out):
    spec = _apply_prior(_load_model(model), A, B)
    paths = _bind_data(spec, data)
    obs = _read_observations(spec, paths)
    result = fit(spec, obs, SolverConfig(algorithm=algo, max_iters=iters, rel_tol=tol, seed=seed))
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for name in spec.factor_names:
        fname = f"factor_{name}.txt"
        write_factor(out / fname, result.factors[name])
        outputs.append(fname)
    _write_csv(out / "trace.csv", ["iteration", "objective"],
               [(k + 1, repr(v)) for k, v in enumerate(result.objective_trace)])
    outputs.append("trace.csv")
    _write_csv(out / "timing.csv", ["iteration", "seconds"],
               [(k + 1, f"{t:.6f}") for k, t in enumerate(result.wall_time)])
    args = {"algo": algo, "iters": iters, "tol": tol, "seed": seed, "A": A, "B": B,
            "termination": result.termination.value, "iterations_run": result.iterations_run}
    inputs = {"model": model, **{f"data:{n}": p for n, p in paths.items()}}
    write_json(out / "manifest.json", _manifest("fit", args, inputs, out, outputs))
    return result


@cli.command("fit")
@click.argument("model", type=click.Path(dir_okay=False))
@click.argument("data", nargs=-1, required=True)
@_algo
@_iters
@_tol
@_seed
@_A
@_B
@click.option("--out", type=click.Path(file_okay=False), required=True)
def cmd_fit(model, data, algo, iters, tol, seed, A, B, out):
    """Fit MODEL to DATA files (one per observation, in order, or NAME=PATH).

    Writes factor_<name>.txt, trace.csv, timing.csv and manifest.json to --out.
    """
    result = _run_fit(model, data, algo, iters, tol, seed, A, B, out)
    click.echo(f"{algo}: {result.iterations_run} iterations ({result.termination.value}), "
               f"objective {result.objective_trace[-1]:.6g}")


# eval ----------------------------------------------------------------------

def _eval_repeat(job):
    spec, obs, target, split, config, out, label, k = job
    train_t, test_t = make_split(obs[target], split)
    train = {**obs, target: train_t}
    rep = link_prediction_eval(spec, config, None, train, test_t, target)
    row = report_row(rep, label, split.hide_fraction, split.seed)
    record = {**row, "run": k, "termination": rep.termination, "train_entries": train_t.nnz,
              "test_entries": test_t.nnz, "objective_trace": rep.objective_trace}
    write_json(Path(out) / "runs" / f"run_{k:02d}.json", record)
    return row


@cli.command("eval")
@click.argument("model", type=click.Path(dir_okay=False))
@click.argument("data", nargs=-1, required=True)
@click.option("--target", default=None, help="Observation to hide entries from (default: the first).")
@click.option("--hide", type=float, default=0.6, show_default=True)
@click.option("--scope", type=click.Choice(["entries", "slices"]), default="entries", show_default=True)
@click.option("--slice-index", default=None)
@_algo
@click.option("--repeats", type=click.IntRange(min=1), default=10, show_default=True)
@_seed
@_iters
@_tol
@_A
@_B
@click.option("--jobs", type=click.IntRange(min=1), default=1, show_default=True,
              help="Repeats to run in parallel.")
@click.option("--label", default=None, help="Model column in the report (default: model file stem).")
@click.option("--out", type=click.Path(file_okay=False), required=True)
def cmd_eval(model, data, target, hide, scope, slice_index, algo, repeats, seed, iters, tol, A, B,
             jobs, label, out):
    """Link-prediction evaluation over repeated random splits.

    Repeat k hides entries of the target observation with seed --seed + k, fits
    on the rest and scores the hidden cells (positives: value > 0). Writes
    results.csv (one row per repeat plus a mean ± std summary) and runs/run_XX.json.
    """
    spec = _apply_prior(_load_model(model), A, B)
    paths = _bind_data(spec, data)
    obs = _read_observations(spec, paths)
    target = target or spec.observation_names[0]
    if target not in obs:
        raise click.UsageError(f"model has no observation {target!r}")
    label = label or Path(model).stem
    out = Path(out)
    jobs_list = [
        (spec, obs, target, SplitSpec(hide, seed + k, scope, slice_index),
         SolverConfig(algorithm=algo, max_iters=iters, rel_tol=tol, seed=seed + k), str(out), label, k)
        for k in range(repeats)
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            rows = list(ex.map(_eval_repeat, jobs_list))
    else:
        rows = [_eval_repeat(j) for j in jobs_list]
    out.mkdir(parents=True, exist_ok=True)
    write_report(out / "results.csv", rows)
    aucs = np.array([r["AUC"] for r in rows])
    sd = aucs.std(ddof=1) if len(aucs) > 1 else 0.0
    click.echo(f"{label} {algo} hide={hide}: AUC {aucs.mean():.4f} ± {sd:.4f} over {repeats} runs")


# bench ---------------------------------------------------------------------

def _parse_dims(text):
    parts = [int(p) for p in str(text).replace("x", ",").split(",") if p.strip()]
    return tuple(parts * 3) if len(parts) == 1 else tuple(parts)


@cli.command("bench")
@click.option("--dims", required=True, help="N for an N x N x N tensor, or a list such as 100,80,60.")
@click.option("--rank", type=click.IntRange(min=1), default=5, show_default=True)
@click.option("--observed-frac", type=float, default=0.01, show_default=True)
@click.option("--noise", type=float, default=0.2, show_default=True, help="Noise std relative to signal std.")
@click.option("--repeats", type=click.IntRange(min=1), default=1, show_default=True)
@_algo
@_iters
@click.option("--tol", type=float, default=1e-7, show_default=True)
@_seed
@click.option("--A", "A", type=float, default=0.5, show_default=True)
@click.option("--B", "B", type=float, default=10.0, show_default=True)
@click.option("--heldout", type=click.IntRange(min=1), default=10000, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
def cmd_bench(dims, rank, observed_frac, noise, repeats, algo, iters, tol, seed, A, B, heldout, out):
    """Planted CP completion benchmark.

    Writes trajectory.csv (repeat, iteration, elapsed_seconds, rmse on held-out
    cells) and summary.csv (per repeat: entries, seconds per iteration, final
    and constant-mean baseline RMSE).
    """
    dims = _parse_dims(dims)
    traj, summary = [], []
    for k in range(repeats):
        s = SynthSpec(dims, rank, observed_fraction=observed_frac, noise_std_fraction=noise, seed=seed + k)
        train, truth = generate_cp_data(s)
        test = sample_heldout(s, truth, min(heldout, s.total_cells - train.nnz), exclude=train)
        spec = cp_model(dict(zip(s.indices, dims)), rank, PriorSpec(A, B))
        config = SolverConfig(algorithm=algo, max_iters=iters, rel_tol=tol, seed=seed + k)
        errs = []
        fit_result = fit(spec, {"X": train}, config,
                         callback=lambda it, f: errs.append(
                             rmse(predict(spec, f, "X", test, "E" if algo == "vb" else "values"), test)))
        elapsed = np.cumsum(fit_result.wall_time)
        traj += [(k, it + 1, f"{elapsed[it]:.6f}", repr(errs[it])) for it in range(len(errs))]
        baseline = float(np.sqrt(np.mean((test.values - train.values.mean()) ** 2)))
        summary.append((k, train.nnz, f"{np.median(fit_result.wall_time):.6f}", fit_result.iterations_run,
                        repr(errs[-1]), repr(baseline)))
        click.echo(f"repeat {k}: {train.nnz} entries, {fit_result.iterations_run} iterations, "
                   f"RMSE {errs[-1]:.4f} (baseline {baseline:.4f})")
    out = Path(out)
    _write_csv(out / "trajectory.csv", ["repeat", "iteration", "elapsed_seconds", "rmse"], traj)
    _write_csv(out / "summary.csv", ["repeat", "entries", "median_iteration_seconds", "iterations",
                                     "rmse", "baseline_rmse"], summary)


# convert and synth ---------------------------------------------------------

@cli.command("convert")
@click.argument("in_file", type=click.Path(dir_okay=False))
@click.option("--from", "fmt_in", type=click.Choice(["coo-text"]), default="coo-text", show_default=True)
@click.option("--to", "fmt_out", type=click.Choice(["coo-text"]), default="coo-text", show_default=True)
@click.option("--reindex", is_flag=True, help="Input coordinates are 1-based.")
@click.option("--indices", default=None, help="Index names for files without a header, e.g. i,j,k.")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Output file (default: stdout).")
def cmd_convert(in_file, fmt_in, fmt_out, reindex, indices, out):
    """Normalize coordinate data: 0-based, sorted, duplicates merged."""
    names = tuple(indices.split(",")) if indices else None
    t = read_coo(in_file, reindex=reindex, dedupe=True, indices=names)
    if out is None:
        click.echo(format_coo(t), nl=False)
    else:
        atomic_write(out, format_coo(t))


@cli.command("synth")
@click.option("--dims", required=True, help="N for an N x N x N tensor, or a list such as 30,20,10.")
@click.option("--rank", type=click.IntRange(min=1), default=2, show_default=True)
@click.option("--observed-frac", type=float, default=1.0, show_default=True)
@click.option("--noise", type=float, default=0.0, show_default=True)
@click.option("--binarize", is_flag=True)
@click.option("--positive-frac", type=float, default=None)
@_seed
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def cmd_synth(dims, rank, observed_frac, noise, binarize, positive_frac, seed, out):
    """Write a planted CP tensor as coordinate text."""
    s = SynthSpec(_parse_dims(dims), rank, observed_frac, noise, seed, binarize=binarize or positive_frac is not None,
                  positive_fraction=positive_frac)
    t, _ = generate_cp_data(s)
    atomic_write(out, format_coo(t))


@cli.command("replay")
@click.argument("manifest", type=click.Path(dir_okay=False))
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--check", is_flag=True, help="Exit 1 unless the outputs match the recorded hashes.")
def cmd_replay(manifest, out, check):
    """Rerun a fit from its manifest.json."""
    m = json.loads(Path(manifest).read_text())
    if m.get("command") != "fit":
        raise click.UsageError(f"{manifest}: cannot replay command {m.get('command')!r}")
    for key, rec in m["inputs"].items():
        if _sha256(rec["path"]) != rec["sha256"]:
            raise click.UsageError(f"{rec['path']}: input changed since the run (sha256 mismatch)")
    a = m["args"]
    data = [f"{k.split(':', 1)[1]}={rec['path']}" for k, rec in m["inputs"].items() if k.startswith("data:")]
    _run_fit(m["inputs"]["model"]["path"], data, a["algo"], a["iters"], a["tol"], a["seed"], a["A"], a["B"], out)
    new = json.loads((Path(out) / "manifest.json").read_text())
    same = new["outputs"] == m["outputs"]
    click.echo("outputs identical" if same else "outputs differ")
    if check and not same:
        raise click.exceptions.Exit(1)


def main(argv=None) -> int:
    """Entry point; returns the process exit code."""
    try:
        rv = cli.main(args=argv, prog_name="tensorvb", standalone_mode=False)
        if isinstance(rv, int):
            return rv
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.ClickException as e:
        e.show()
        return 1
    except NumericError as e:
        click.echo(f"numeric error: {e}", err=True)
        return 2
    except (FloatingPointError, ZeroDivisionError, OverflowError) as e:
        click.echo(f"numeric error: {e}", err=True)
        return 2
    except TensorVBError as e:
        click.echo(f"error: {e}", err=True)
        return 1
    except OSError as e:
        click.echo(f"error: {e.filename}: {e.strerror}", err=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
