"""Command line entry point: ``xspeech <subcommand>``.

Data goes to files; diagnostics go to stderr. Exit status is non-zero on any error.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from contextlib import contextmanager
from pathlib import Path

import click
from filelock import FileLock

from . import corpus, metrics, trainsets
from .ensemble import FusionError, compute_weights, fuse_records
from .llm_client import (DecodingParams, LLMClient, LLMError, ModelEndpoint, ResponseCache, RetryPolicy,
                         run_batch)
from .promptkit import PromptStyle, TemplateError, TemplateSet
from .records import REPORT, RunArtifact

log = logging.getLogger("xspeech")


def _fail(msg: str):
    raise click.ClickException(msg)


@contextmanager
def _locked(run_dir: Path):
    run_dir.mkdir(parents=True, exist_ok=True)
    with FileLock(str(run_dir / ".lock"), timeout=0):
        yield


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _load_template(path: str | None) -> TemplateSet:
    try:
        return TemplateSet.load(path) if path else TemplateSet.default()
    except (TemplateError, OSError, ValueError) as exc:
        _fail(f"bad template: {exc}")


def _read_json(path: str | Path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        _fail(f"cannot read {path}: {exc}")


def _load_samples(path: str) -> list[corpus.Sample]:
    try:
        return corpus.read_samples(path)
    except (corpus.CorpusError, OSError, KeyError) as exc:
        _fail(f"cannot read samples {path}: {exc}")


def _load_run(path: str | Path) -> RunArtifact:
    try:
        return RunArtifact.load(path)
    except (OSError, ValueError, KeyError) as exc:
        _fail(f"cannot read run {path}: {exc}")


@click.group()
@click.option("-v", "--verbose", count=True, help="More logging on stderr.")
def main(verbose: int):
    """Extreme-speech classification experiments against OpenAI-compatible endpoints."""
    logging.basicConfig(
        level=logging.DEBUG if verbose > 1 else logging.INFO if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )


@main.command()
@click.argument("corpus_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False), help="Output directory.")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="SplitConfig JSON.")
@click.option("--seed", type=int, help="Overrides the config seed.")
@click.option("--text-col", default="text", show_default=True)
@click.option("--label-col", default="label", show_default=True)
def split(corpus_path, out_dir, config_path, seed, text_col, label_col):
    """Deduplicate a labelled corpus and split it into train/dev/test."""
    try:
        raw = _read_json(config_path) if config_path else {}
        if seed is not None:
            raw["seed"] = seed
        config = corpus.SplitConfig.from_dict(raw)
        samples = corpus.dedup(corpus.load_corpus(corpus_path, corpus.ColumnSchema(text_col, label_col)))
        assignment = corpus.stratified_split(samples, config)
    except corpus.CorpusError as exc:
        _fail(str(exc))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus.write_assignment(assignment, samples, out / "assignment.csv", config)
    for sp in corpus.SPLITS:
        ids = set(assignment.ids(sp))
        corpus.write_samples([s for s in samples if s.id in ids], out / f"{sp.value}.csv")
    counts = assignment.counts(samples)
    for c, row in counts.items():
        log.info("%s: train=%d dev=%d test=%d", corpus.CLASS_NAMES[c], *row)
    totals = [sum(counts[c][i] for c in counts) for i in range(3)]
    click.echo(f"split {len(samples)} samples: train={totals[0]} dev={totals[1]} test={totals[2]}", err=True)


@main.command()
@click.option("--samples", "samples_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "run_dir", required=True, type=click.Path(file_okay=False), help="Run directory.")
@click.option("--endpoint", "endpoint_path", type=click.Path(exists=True, dir_okay=False), help="Endpoint JSON config.")
@click.option("--model")
@click.option("--base-url")
@click.option("--style", type=click.Choice([s.value for s in PromptStyle]), default="direct", show_default=True)
@click.option("--split", "split_name", help="Split name recorded in the manifest (default: samples file stem).")
@click.option("--limit", default=8, show_default=True, type=click.IntRange(min=1), help="Max in-flight requests.")
@click.option("--cache-dir", type=click.Path(file_okay=False))
@click.option("--logprobs/--no-logprobs", default=None, help="Request top-K logprobs and extract class distributions.")
@click.option("--top-logprobs", type=int)
@click.option("--temperature", type=float)
@click.option("--max-tokens", type=int)
@click.option("--template", "template_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--max-failure-rate", default=0.5, show_default=True, type=float)
@click.option("--max-attempts", default=5, show_default=True, type=click.IntRange(min=1))
@click.option("--retry-base", default=1.0, show_default=True, type=float, help="First backoff delay in seconds.")
def infer(samples_path, run_dir, endpoint_path, model, base_url, style, split_name, limit, cache_dir,
          logprobs, top_logprobs, temperature, max_tokens, template_path, max_failure_rate, max_attempts,
          retry_base):
    """Classify a split with one model endpoint."""
    cfg = _read_json(endpoint_path) if endpoint_path else {}
    style = PromptStyle(style)
    template = _load_template(template_path or cfg.get("template"))
    overrides = {k: v for k, v in cfg.get("params", {}).items()}
    for key, val in (("logprobs", logprobs), ("top_logprobs", top_logprobs),
                     ("temperature", temperature), ("max_tokens", max_tokens)):
        if val is not None:
            overrides[key] = val
    overrides.setdefault("logprobs", False)
    model = model or cfg.get("model")
    base_url = base_url or cfg.get("base_url")
    if not model or not base_url:
        _fail("an endpoint needs --model and --base-url (or an --endpoint config)")
    try:
        endpoint = ModelEndpoint(
            model_id=model,
            base_url=base_url,
            params=DecodingParams.for_style(style, **overrides),
            api_key=cfg.get("api_key"),
            api_key_env=cfg.get("api_key_env", "XSPEECH_API_KEY"),
        )
    except (TypeError, ValueError) as exc:
        _fail(f"bad endpoint configuration: {exc}")
    samples = _load_samples(samples_path)
    cache = ResponseCache(cache_dir) if cache_dir else None
    run_dir = Path(run_dir)
    retry = RetryPolicy(max_attempts=max_attempts, base_delay=retry_base)
    with _locked(run_dir), LLMClient(retry) as client:
        try:
            records = run_batch(client, endpoint, samples, style, limit=limit, cache=cache,
                                template=template, max_failure_rate=max_failure_rate)
        except LLMError as exc:
            _fail(str(exc))
        manifest = {
            "model_id": endpoint.model_id,
            "base_url": endpoint.base_url,
            "style": style.value,
            "split": split_name or Path(samples_path).stem,
            "samples_sha256": _sha256_file(Path(samples_path)),
            "template_hash": template.digest(),
            "params": dict(endpoint.params.__dict__),
        }
        RunArtifact(manifest, records).save(run_dir)
    unparsed = sum(r.label is None for r in records)
    click.echo(f"{len(records)} records ({unparsed} unparsed, {client.upstream_calls} upstream calls) -> {run_dir}",
               err=True)


@main.command("export-sft")
@click.option("--samples", "samples_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--variant", type=click.Choice([v.value for v in trainsets.SftVariant]), default="label-only",
              show_default=True)
@click.option("--justifications", "just_run", type=click.Path(exists=True, file_okay=False),
              help="Justify-style inference run supplying justifications.")
@click.option("--justifications-csv", type=click.Path(exists=True, dir_okay=False),
              help="CSV with sample_id,justification columns.")
@click.option("--template", "template_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def export_sft(samples_path, variant, just_run, justifications_csv, template_path, out):
    """Write an SFT JSONL file from a (train) split."""
    template = _load_template(template_path)
    samples = _load_samples(samples_path)
    justifications = {}
    source = None
    if just_run:
        run = _load_run(just_run)
        justifications.update({r.sample_id: r.justification for r in run.records if r.justification})
        source = run.manifest.get("model_id")
    if justifications_csv:
        with open(justifications_csv, newline="", encoding="utf-8") as fh:
            justifications.update({row["sample_id"]: row["justification"] for row in csv.DictReader(fh)})
        source = source or str(justifications_csv)
    try:
        recs = trainsets.build_sft_records(samples, trainsets.SftVariant(variant), justifications, template)
    except trainsets.TrainsetError as exc:
        _fail(str(exc))
    n = trainsets.write_jsonl(recs, out, "sft")
    trainsets.write_manifest(out, "sft", n, variant=variant, source_split=Path(samples_path).stem,
                             template_hash=template.digest(), justification_source=source)
    click.echo(f"{n} SFT records -> {out}", err=True)


@main.command("build-dpo")
@click.option("--run", "run_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--samples", "samples_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--template", "template_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def build_dpo(run_dir, samples_path, template_path, out):
    """Mine DPO preference pairs from a dev-split run carrying class distributions."""
    template = _load_template(template_path)
    run = _load_run(run_dir)
    samples = {s.id: s for s in _load_samples(samples_path)}
    try:
        result = trainsets.mine_dpo_pairs(run.records, samples, template)
    except trainsets.TrainsetError as exc:
        _fail(str(exc))
    n = trainsets.write_jsonl(result.pairs, out, "dpo")
    trainsets.write_manifest(out, "dpo", n, skipped=len(result.skipped), source_split=run.manifest.get("split"),
                             template_hash=template.digest(), mining_model=run.manifest.get("model_id"))
    click.echo(f"{n} preference pairs ({len(result.skipped)} skipped) -> {out}", err=True)


def _golds_for(golds_path: str, split_name: str | None) -> dict[str, int]:
    golds = {}
    with open(golds_path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            if split_name and "split" in row and row["split"] != split_name:
                continue
            golds[row["sample_id"]] = corpus.normalize_label(row["label"])
    return golds


@main.command("eval")
@click.argument("run_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--golds", "golds_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help="assignment.csv or a per-split samples CSV.")
@click.option("--split", "split_name", help="Filter golds to this split (default: the run's split).")
def eval_cmd(run_dir, golds_path, split_name):
    """Score a run: writes report.json and confusion.csv into the run directory."""
    run_dir = Path(run_dir)
    with _locked(run_dir):
        run = _load_run(run_dir)
        if split_name is None and run.manifest.get("split") in [s.value for s in corpus.SPLITS]:
            split_name = run.manifest["split"]
        golds = _golds_for(golds_path, split_name)
        try:
            report = metrics.evaluate(run.predictions(), golds)
        except metrics.MetricsError as exc:
            _fail(str(exc))
        (run_dir / REPORT).write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
        (run_dir / "confusion.csv").write_text(report.confusion.to_csv(), encoding="utf-8")
    click.echo(f"F1-macro {report.f1_macro * 100:.2f} on {report.n} samples "
               f"({report.unparsed_count} unparsed)", err=True)


@main.command()
@click.option("--member", "members", nargs=2, multiple=True, required=True,
              type=(click.Path(exists=True, file_okay=False), click.Path(exists=True, file_okay=False)),
              metavar="RUN DEV_RUN", help="A run to fuse and the evaluated dev run supplying its weight.")
@click.option("--rule", type=click.Choice(["vote", "prob"]), required=True)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
def ensemble(members, rule, out_dir):
    """Fuse member runs with F1-macro weights from their dev reports."""
    if len(members) < 2:
        _fail(f"an ensemble needs at least 2 members, got {len(members)}")
    runs, dev_reports, paths = {}, {}, {}
    for run_path, dev_path in members:
        name = Path(run_path).name
        if name in runs:
            _fail(f"duplicate member {name}")
        runs[name] = _load_run(run_path)
        report_path = Path(dev_path) / REPORT
        if not report_path.exists():
            _fail(f"{dev_path} has no {REPORT}; run `xspeech eval` on it first")
        dev_reports[name] = metrics.EvalReport.from_dict(_read_json(report_path))
        paths[name] = (str(run_path), str(dev_path))
    try:
        spec = compute_weights(dev_reports)
        records = fuse_records({m: r.records for m, r in runs.items()}, spec, rule)
    except FusionError as exc:
        _fail(str(exc))
    first = next(iter(runs.values())).manifest
    out = Path(out_dir)
    with _locked(out):
        doc = {
            "rule": rule,
            "members": [{"name": m, "run": paths[m][0], "dev_run": paths[m][1], "weight": spec.weights[m]}
                        for m in spec.members],
        }
        (out / "ensemble.json").write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
        manifest = {
            "model_id": f"ensemble-{rule}",
            "style": first.get("style"),
            "split": first.get("split"),
            "template_hash": first.get("template_hash"),
            "members": list(spec.members),
            "weights": dict(spec.weights),
        }
        RunArtifact(manifest, records).save(out)
    click.echo(f"fused {len(spec.members)} members over {len(records)} samples -> {out}", err=True)


def _named(spec: str) -> tuple[str, Path]:
    name, sep, path = spec.partition("=")
    return (name, Path(path)) if sep else (Path(spec).name, Path(spec))


@main.command()
@click.argument("runs", nargs=-1, required=True)
@click.option("--format", "fmt", type=click.Choice(["markdown", "csv"]), default="markdown", show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def report(runs, fmt, out):
    """Render evaluated runs (``[NAME=]RUN_DIR``) as a per-class F1 table."""
    reports = {}
    for spec in runs:
        name, path = _named(spec)
        rp = path / REPORT if path.is_dir() else path
        if not rp.exists():
            _fail(f"no report at {rp}")
        reports[name] = metrics.EvalReport.from_dict(_read_json(rp))
    Path(out).write_text(metrics.render_report(reports, fmt), encoding="utf-8", newline="\n")
    click.echo(f"report for {len(reports)} run(s) -> {out}", err=True)


@main.command()
@click.argument("runs", nargs=-1, required=True)
@click.option("--golds", "golds_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--split", "split_name")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def agreement(runs, golds_path, split_name, out):
    """Pairwise agreement / error-overlap matrix across runs."""
    preds = {}
    for spec in runs:
        name, path = _named(spec)
        run = _load_run(path)
        split_name = split_name or run.manifest.get("split")
        preds[name] = run.predictions()
    golds = _golds_for(golds_path, split_name)
    try:
        text = metrics.agreement_matrix_csv(preds, golds)
    except metrics.MetricsError as exc:
        _fail(str(exc))
    Path(out).write_text(text, encoding="utf-8", newline="\n")


@main.command("mock-llm")
@click.argument("script", type=click.Path(exists=True, dir_okay=False))
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True, type=int)
def mock_llm(script, host, port):
    """Serve the scripted mock chat-completions endpoint until interrupted."""
    from .mockserver import load_script, serve

    serve(load_script(script), host=host, port=port)


if __name__ == "__main__":
    main()
