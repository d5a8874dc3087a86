"""`wildlabel` command-line interface.

Subcommands follow the pipeline order: harvest -> download -> gate ->
sample -> annotate -> resolve -> stats -> noise -> train -> eval -> report,
plus `simulate` for the self-contained synthetic benchmark. Operational
failures exit nonzero with a one-line JSON error on stderr.
"""

from __future__ import annotations

import functools
import json
import os
import sys
from pathlib import Path

import click

from .config import WorkspaceConfig
from .errors import WildlabelError
from .taxonomy import DEFAULT_LANGUAGES


def json_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (click.ClickException, click.Abort, SystemExit):
            raise
        except KeyboardInterrupt:
            raise
        except BrokenPipeError:
            # downstream pipe (e.g. `| head`) closed early: exit quietly
            devnull = os.open(os.devnull, os.O_WRONLY)
            os.dup2(devnull, sys.stdout.fileno())
            sys.exit(0)
        except Exception as exc:
            click.echo(json.dumps({"error": type(exc).__name__,
                                   "detail": str(exc)}), err=True)
            sys.exit(1)
    return wrapper


def _echo_json(obj):
    click.echo(json.dumps(obj, indent=2, sort_keys=True))


@click.group()
@click.option("--workspace", "-w", default=None, metavar="DIR",
              help="Workspace root (env WILDLABEL_WORKSPACE overrides; "
                   "default ./workspace).")
@click.version_option(package_name="wildlabel")
@click.pass_context
def main(ctx, workspace):
    ctx.obj = WorkspaceConfig.resolve(workspace)


def _parse_engines(spec: str, fixtures_root: Path):
    from .harvest import FixtureEngine

    adapters = []
    for item in [s.strip() for s in spec.split(",") if s.strip()]:
        if item == "fixture":
            adapters.append(FixtureEngine("fixture", fixtures_root))
        elif item.startswith("fixture:"):
            adapters.append(FixtureEngine(item.split(":", 1)[1], fixtures_root))
        else:
            raise WildlabelError(
                f"unknown engine {item!r}; supported: fixture[:<name>] "
                "(live search APIs are out of scope)")
    if not adapters:
        raise WildlabelError("no engines given")
    return adapters


@main.command()
@click.option("--keywords", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Keyword CSV (default: bundled sample list).")
@click.option("--languages", default=None, metavar="CODES",
              help=f"Comma-separated language codes "
                   f"(default {','.join(DEFAULT_LANGUAGES)}).")
@click.option("--engines", default=None, metavar="SPEC",
              help="Comma-separated engines, e.g. fixture:google,fixture:bing.")
@click.option("--limit", type=int, default=None,
              help="URLs stored per (query, engine) pair (default 200).")
@click.option("--fixtures", type=click.Path(file_okay=False), default=None,
              help="Fixture root (default <workspace>/fixtures).")
@click.pass_obj
@json_errors
def harvest(cfg: WorkspaceConfig, keywords, languages, engines, limit, fixtures):
    """Expand keywords into queries and store engine result URLs."""
    from .catalog import Catalog
    from .harvest import run_harvest
    from .taxonomy import bundled_keyword_file, expand_query_templates, \
        load_keyword_file

    keywords = keywords or str(bundled_keyword_file())
    languages = [s.strip() for s in
                 cfg.setting("languages", languages,
                             default=",".join(DEFAULT_LANGUAGES)).split(",")
                 if s.strip()]
    limit = cfg.setting("limit", limit, default=200, cast=int)
    fixtures_root = Path(cfg.setting("fixtures_dir", fixtures,
                                     default=str(cfg.workspace / "fixtures")))
    entries, problems = load_keyword_file(keywords, allowed_languages=languages)
    specs, skips = expand_query_templates(entries, languages)
    adapters = _parse_engines(cfg.setting("engines", engines,
                                          default="fixture"), fixtures_root)
    with Catalog(cfg.workspace, writable=True) as catalog:
        report = run_harvest(specs, adapters, limit, catalog)
    out = report.to_json()
    out["queries"] = len(specs)
    out["keyword_problems"] = problems
    out["skipped_pairs"] = [
        {"keyword": s.english_keyword, "emotion": s.emotion.key,
         "language": s.language, "reason": s.reason} for s in skips]
    _echo_json(out)


@main.command()
@click.option("--rate", type=float, default=None,
              help="Max requests per second per host (default 2).")
@click.option("--parallel", type=int, default=None,
              help="Max requests in flight (default 8).")
@click.option("--timeout", type=float, default=None,
              help="Per-request timeout in seconds (default 15).")
@click.option("--retries", type=int, default=None,
              help="Retries per URL with exponential backoff (default 2).")
@click.option("--log-out", type=click.Path(dir_okay=False), default=None,
              help="Write the request log as JSONL for rate auditing.")
@click.pass_obj
@json_errors
def download(cfg: WorkspaceConfig, rate, parallel, timeout, retries, log_out):
    """Fetch every pending URL under the configured rate limits."""
    from .catalog import Catalog
    from .harvest import DEFAULT_USER_AGENT, FetchPolicy, download_pending

    policy = FetchPolicy(
        per_host_rate=cfg.setting("rate", rate, default=2.0, cast=float),
        max_parallel=cfg.setting("parallel", parallel, default=8, cast=int),
        timeout=cfg.setting("timeout", timeout, default=15.0, cast=float),
        retries=cfg.setting("retries", retries, default=2, cast=int),
    )
    user_agent = cfg.setting("user_agent", None, default=DEFAULT_USER_AGENT)
    with Catalog(cfg.workspace, writable=True) as catalog:
        report = download_pending(catalog, policy, user_agent=user_agent)
    if log_out:
        with open(log_out, "w", encoding="utf-8") as fh:
            for entry in report.request_log:
                fh.write(json.dumps(entry.__dict__) + "\n")
    _echo_json(report.to_json())


@main.command()
@click.option("--detector", default="fixture", metavar="KIND",
              help="fixture | external:<command>.")
@click.pass_obj
@json_errors
def gate(cfg: WorkspaceConfig, detector):
    """Apply the face keep rule to every downloaded image."""
    from .catalog import Catalog, DownloadStatus
    from .facegate import ExternalDetector, FixtureDetector, gate_record

    if detector == "fixture":
        det = FixtureDetector(cfg.workspace)
    elif detector.startswith("external:"):
        det = ExternalDetector(detector.split(":", 1)[1])
    else:
        raise WildlabelError(
            f"unknown detector {detector!r}; use fixture or external:<command>")
    kept = dropped = 0
    with Catalog(cfg.workspace, writable=True) as catalog:
        for record in list(catalog.records()):
            if record.download_status is not DownloadStatus.DOWNLOADED:
                continue
            decision = gate_record(catalog, record, det)
            if decision.keep:
                kept += 1
            else:
                dropped += 1
    _echo_json({"kept": kept, "dropped": dropped, "detector": det.name})


@main.command()
@click.option("--per-emotion", type=int, default=None,
              help="Images sampled per intended emotion (default 4000).")
@click.option("--seed", type=int, default=None, help="Sampling seed.")
@click.pass_obj
@json_errors
def sample(cfg: WorkspaceConfig, per_emotion, seed):
    """Draw the stratified annotation batch."""
    from .annotate import sample_batch
    from .catalog import Catalog

    per_emotion = cfg.setting("per_emotion", per_emotion, default=4000, cast=int)
    seed = cfg.setting("seed", seed, default=0, cast=int)
    with Catalog(cfg.workspace) as catalog:
        batch = sample_batch(catalog, per_emotion, seed)
    written = batch.save(cfg.workspace)
    _echo_json({
        "per_emotion": per_emotion,
        "seed": seed,
        "strata": {label.key: len(ids) for label, ids in batch.strata.items()},
        "total": len(batch.task_order),
        "warnings": batch.warnings,
        "written": written,
    })


@main.group()
def annotate():
    """Annotation service commands."""


@annotate.command()
@click.option("--port", type=int, default=None, help="Listen port (default 8080).")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--ui-dir", type=click.Path(file_okay=False), default=None,
              help="Static UI bundle directory (default: frontend/dist if present).")
@click.option("--crop-size", type=int, default=256, show_default=True)
@click.pass_obj
@json_errors
def serve(cfg: WorkspaceConfig, port, host, ui_dir, crop_size):
    """Serve the annotation API (and UI, when built) until interrupted."""
    from .service import serve as run_service

    port = cfg.setting("port", port, default=8080, cast=int)
    if ui_dir is None:
        candidate = Path("frontend") / "dist"
        ui_dir = str(candidate) if candidate.is_dir() else None
    click.echo(f"serving on http://{host}:{port}/ (workspace {cfg.workspace})",
               err=True)
    run_service(cfg.workspace, port=port, host=host, ui_dir=ui_dir,
                crop_size=crop_size)


@main.command()
@click.option("--seed", type=int, default=None,
              help="Base seed for random-pick adjudication.")
@click.pass_obj
@json_errors
def resolve(cfg: WorkspaceConfig, seed):
    """Adjudicate every doubly-annotated image."""
    from .annotate import resolve_all
    from .catalog import Catalog

    seed = cfg.setting("seed", seed, default=0, cast=int)
    with Catalog(cfg.workspace, writable=True) as catalog:
        summary = resolve_all(catalog, seed)
    _echo_json(summary)


@main.command()
@click.option("--out", type=click.Path(dir_okay=False), default=None,
              help="Also write the JSON to a file.")
@click.pass_obj
@json_errors
def stats(cfg: WorkspaceConfig, out):
    """Agreement, per-category counts, query confusion and funnel counts."""
    from .annotate import agreement_stats, query_confusion
    from .catalog import Catalog
    from .errors import NotReadyError

    with Catalog(cfg.workspace) as catalog:
        try:
            agreement = agreement_stats(catalog).to_json()
        except NotReadyError as exc:
            agreement = {"n_pairs": 0, "detail": str(exc)}
        payload = {
            "agreement": agreement,
            "query_confusion": query_confusion(catalog).to_json(),
            "funnel": catalog.funnel_stats().to_json(),
        }
    if out:
        Path(out).write_text(json.dumps(payload, indent=2, sort_keys=True),
                             encoding="utf-8")
    _echo_json(payload)


@main.group()
def noise():
    """Confusion-matrix estimation and simulation."""


@noise.command("estimate")
@click.option("--alpha", type=float, default=1.0, show_default=True,
              help="Additive smoothing for the pair counts.")
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@click.pass_obj
@json_errors
def noise_estimate(cfg: WorkspaceConfig, alpha, out):
    """Estimate Q from the dual-labeled subset and write it as text."""
    from .annotate import label_pairs
    from .catalog import Catalog
    from .noisemodel import estimate_from_pairs, save_matrix

    with Catalog(cfg.workspace) as catalog:
        pairs = label_pairs(catalog)
    matrix = estimate_from_pairs(pairs, smoothing=alpha)
    save_matrix(matrix, out)
    _echo_json({"pairs": len(pairs), "alpha": alpha, "out": out})


@noise.command("show")
@click.option("--matrix", "source", default="builtin", show_default=True,
              help="builtin (the published query-confusion channel) or a file.")
@json_errors
def noise_show(source):
    """Print a noise matrix with class labels."""
    from .noisemodel import load_matrix, query_noise_matrix
    from .taxonomy import EXPRESSION_KEYS

    matrix = query_noise_matrix() if source == "builtin" else load_matrix(source)
    header = "true\\noisy " + " ".join(f"{k[:4]:>7}" for k in EXPRESSION_KEYS)
    click.echo(header)
    for key, row in zip(EXPRESSION_KEYS, matrix.values):
        click.echo(f"{key:>10} " + " ".join(f"{v:7.4f}" for v in row))


@noise.command("simulate")
@click.option("--matrix", "source", default="builtin", show_default=True)
@click.option("--per-class", type=int, default=1000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None,
              help="Write flipped labels as CSV (true,noisy).")
@json_errors
def noise_simulate(source, per_class, seed, out):
    """Flip balanced synthetic labels through a noise matrix."""
    import numpy as np

    from .noisemodel import flip_labels, load_matrix, query_noise_matrix
    from .taxonomy import EXPRESSION_KEYS, NUM_EXPRESSIONS

    matrix = query_noise_matrix() if source == "builtin" else load_matrix(source)
    true = np.repeat(np.arange(NUM_EXPRESSIONS), per_class)
    noisy = flip_labels(true, matrix, np.random.default_rng(seed))
    empirical = np.zeros((NUM_EXPRESSIONS, NUM_EXPRESSIONS))
    for t, n in zip(true, noisy):
        empirical[t, n] += 1
    empirical /= per_class
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write("true,noisy\n")
            for t, n in zip(true, noisy):
                fh.write(f"{EXPRESSION_KEYS[t]},{EXPRESSION_KEYS[n]}\n")
    _echo_json({"per_class": per_class, "seed": seed,
                "empirical": [[round(v, 4) for v in row] for row in empirical]})


@main.command()
@click.option("--scenario", type=click.Choice(["clean", "mix", "noisemix"]),
              required=True)
@click.option("--preset", "preset_name", default="desk", show_default=True,
              type=click.Choice(["paper", "desk"]))
@click.option("--seed", type=int, default=None, help="Training seed.")
@click.option("--out", type=click.Path(dir_okay=False), required=True,
              help="Checkpoint path; history lands next to it.")
@click.option("--model", "model_kind", default="relunet", show_default=True,
              type=click.Choice(["affine", "relunet"]))
@click.option("--hidden", type=int, default=32, show_default=True)
@click.option("--crop-size", type=int, default=32, show_default=True)
@click.option("--margin", type=float, default=0.25, show_default=True)
@click.option("--color", is_flag=True, help="Train on RGB instead of grayscale.")
@click.option("--test-fraction", type=float, default=0.2, show_default=True)
@click.option("--noise-matrix", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Q file for noisemix (default: estimate).")
@click.option("--alpha", type=float, default=1.0, show_default=True)
@click.pass_obj
@json_errors
def train(cfg: WorkspaceConfig, scenario, preset_name, seed, out, model_kind,
          hidden, crop_size, margin, color, test_fraction, noise_matrix, alpha):
    """Train a reference classifier on the workspace dataset."""
    from .annotate import label_pairs
    from .catalog import Catalog
    from .noisemodel import estimate_from_pairs, load_matrix
    from .seeds import derive_seed
    from .trainer import (ScenarioKind, TrainingDivergedError, assign_splits,
                          build_model, load_samples_from_catalog, preset,
                          save_checkpoint)
    from .trainer import train as run_training

    seed = cfg.setting("seed", seed, default=0, cast=int)
    kind = ScenarioKind(scenario)
    with Catalog(cfg.workspace, writable=True) as catalog:
        n_train, n_test = assign_splits(catalog, test_fraction, seed)
        datasets = load_samples_from_catalog(
            catalog, crop_size=crop_size, margin=margin, grayscale=not color)
        if not datasets.clean_train:
            raise WildlabelError("no clean training samples in the workspace")
        q = None
        if kind is ScenarioKind.NOISE_MODELED_MIX:
            q = (load_matrix(noise_matrix) if noise_matrix
                 else estimate_from_pairs(label_pairs(catalog), smoothing=alpha))
        config = preset(preset_name, seed=seed)
        feature_dim = len(datasets.clean_train[0].features)
        model = build_model(model_kind, feature_dim, hidden=hidden,
                            seed=derive_seed(seed, "init"))
        try:
            result = run_training(kind, datasets.clean_train,
                                  datasets.noisy or None, q, model, config)
        except TrainingDivergedError as exc:
            diag = Path(out).with_suffix(".diverged.json")
            diag.write_text(json.dumps({
                "phase": exc.phase, "iteration": exc.iteration,
                "loss": exc.loss, "model": exc.model_desc,
                "params": {k: v.tolist() for k, v in exc.model_state.items()},
            }), encoding="utf-8")
            raise WildlabelError(
                f"training diverged; diagnostic checkpoint at {diag}") from exc
    save_checkpoint(result.model, out, scenario=kind, config=config,
                    features={"crop_size": crop_size, "margin": margin,
                              "grayscale": not color})
    history_path = Path(out).with_suffix(".history.json")
    history_path.write_text(json.dumps(
        [h.__dict__ for h in result.history]), encoding="utf-8")
    _echo_json({
        "scenario": scenario,
        "clean_train": len(datasets.clean_train),
        "clean_test": len(datasets.clean_test),
        "noisy": len(datasets.noisy),
        "split": {"train_records": n_train, "test_records": n_test},
        "iterations": len(result.history),
        "final_loss": result.history[-1].loss if result.history else None,
        "checkpoint": out,
        "history": str(history_path),
    })


@main.command("eval")
@click.option("--model", "model_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--test", "test_ref", default="catalog", show_default=True,
              help="Test split reference; 'catalog' uses split=test records.")
@click.option("--format", "fmt", default="json", show_default=True,
              type=click.Choice(["json", "csv", "text"]))
@click.option("--crop-size", type=int, default=None,
              help="Crop size (default: what the checkpoint was trained on).")
@click.option("--margin", type=float, default=None,
              help="Crop margin (default: from the checkpoint).")
@click.option("--color/--grayscale", "color", default=None,
              help="Channel mode (default: from the checkpoint).")
@click.option("--out", type=click.Path(dir_okay=False), default=None)
@click.pass_obj
@json_errors
def eval_cmd(cfg: WorkspaceConfig, model_path, test_ref, fmt, crop_size,
             margin, color, out):
    """Evaluate a checkpoint on the held-out test split."""
    from .catalog import Catalog
    from .evaluation import evaluate, format_report_csv, format_report_text
    from .trainer import load_checkpoint, load_samples_from_catalog

    if test_ref != "catalog":
        raise WildlabelError("only --test catalog is supported")
    model, meta = load_checkpoint(model_path)
    features = meta.get("features") or {}
    crop_size = crop_size if crop_size is not None \
        else features.get("crop_size", 32)
    margin = margin if margin is not None else features.get("margin", 0.25)
    grayscale = features.get("grayscale", True) if color is None else not color
    with Catalog(cfg.workspace) as catalog:
        datasets = load_samples_from_catalog(
            catalog, crop_size=crop_size, margin=margin, grayscale=grayscale)
    if not datasets.clean_test:
        raise WildlabelError("no test split in the workspace; run train first")
    report = evaluate(model, datasets.clean_test,
                      scenario=meta.get("scenario"),
                      config_hash=meta.get("config_hash"))
    if fmt == "json":
        rendered = json.dumps(report.to_json(), indent=2, sort_keys=True)
    elif fmt == "csv":
        rendered = format_report_csv(report)
    else:
        rendered = format_report_text(report)
    if out:
        Path(out).write_text(rendered + ("\n" if not rendered.endswith("\n")
                                         else ""), encoding="utf-8")
    click.echo(rendered)


@main.command()
@click.option("--seeds", type=int, default=5, show_default=True,
              help="Number of benchmark seeds.")
@click.option("--base-seed", type=int, default=0, show_default=True)
@click.option("--imbalanced", is_flag=True,
              help="Clean disgust/fear at 25% of other classes.")
@click.option("--oracle-q", is_flag=True,
              help="Train with the true flip channel instead of estimating Q.")
@click.option("--flip", "flip_kind", default="query", show_default=True,
              type=click.Choice(["query", "identity"]))
@click.option("--model", "model_kind", default="relunet", show_default=True,
              type=click.Choice(["affine", "relunet"]))
@click.option("--hidden", type=int, default=32, show_default=True)
@click.option("--dims", type=int, default=16, show_default=True)
@click.option("--clean-per-class", type=int, default=300, show_default=True)
@click.option("--noisy-per-class", type=int, default=3000, show_default=True)
@click.option("--test-per-class", type=int, default=1000, show_default=True)
@click.option("--mean-scale", type=float, default=0.8, show_default=True)
@click.option("--smoothing", type=float, default=1.0, show_default=True)
@click.option("--preset", "preset_name", default="desk", show_default=True,
              type=click.Choice(["paper", "desk"]))
@click.option("--out", type=click.Path(dir_okay=False), default=None)
@json_errors
def simulate(seeds, base_seed, imbalanced, oracle_q, flip_kind, model_kind,
             hidden, dims, clean_per_class, noisy_per_class, test_per_class,
             mean_scale, smoothing, preset_name, out):
    """Run the synthetic noisy-label benchmark end to end (no network)."""
    from .simulate import BenchmarkConfig, run_benchmark

    cfg = BenchmarkConfig(
        dims=dims, clean_per_class=clean_per_class,
        noisy_per_class=noisy_per_class, test_per_class=test_per_class,
        mean_scale=mean_scale, model=model_kind, hidden=hidden,
        smoothing=smoothing, oracle_q=oracle_q, imbalanced=imbalanced,
        flip_kind=flip_kind, preset_name=preset_name)
    result = run_benchmark(cfg, seeds=range(base_seed, base_seed + seeds))
    payload = result.to_json()
    if out:
        Path(out).write_text(json.dumps(payload, indent=2, sort_keys=True),
                             encoding="utf-8")
    click.echo(f"benchmark finished in {result.elapsed_seconds:.1f}s", err=True)
    _echo_json(payload)


@main.command()
@click.option("--simulate", "simulate_path",
              type=click.Path(exists=True, dir_okay=False), default=None,
              help="Benchmark JSON from `wildlabel simulate --out`.")
@click.option("--eval", "eval_path",
              type=click.Path(exists=True, dir_okay=False), default=None,
              help="Evaluation JSON from `wildlabel eval --format json --out`.")
@click.option("--history", "history_path",
              type=click.Path(exists=True, dir_okay=False), default=None,
              help="Training history JSON written by `wildlabel train`.")
@click.option("--stats/--no-stats", "with_stats", default=False,
              help="Render annotation statistics from the workspace.")
@click.option("--out-dir", type=click.Path(file_okay=False),
              default="reports", show_default=True)
@click.pass_obj
@json_errors
def report(cfg: WorkspaceConfig, simulate_path, eval_path, history_path,
           with_stats, out_dir):
    """Render figures and CSV tables from pipeline outputs."""
    from . import report as rendering

    written: list[str] = []
    out_dir = Path(out_dir)
    if simulate_path:
        payload = json.loads(Path(simulate_path).read_text(encoding="utf-8"))
        written += [str(p) for p in rendering.render_simulate(payload, out_dir)]
    if eval_path:
        payload = json.loads(Path(eval_path).read_text(encoding="utf-8"))
        written += [str(p) for p in rendering.render_eval(payload, out_dir)]
    if history_path:
        payload = json.loads(Path(history_path).read_text(encoding="utf-8"))
        written += [str(p) for p in rendering.render_history(payload, out_dir)]
    if with_stats:
        from .annotate import agreement_stats, query_confusion
        from .catalog import Catalog
        from .errors import NotReadyError

        with Catalog(cfg.workspace) as catalog:
            try:
                agreement = agreement_stats(catalog).to_json()
            except NotReadyError:
                agreement = {}
            payload = {"agreement": agreement,
                       "query_confusion": query_confusion(catalog).to_json()}
        written += [str(p) for p in rendering.render_stats(payload, out_dir)]
    if not written:
        raise WildlabelError(
            "nothing to render; pass --simulate/--eval/--history/--stats")
    _echo_json({"written": written})


if __name__ == "__main__":
    main()
