"""Command-line pipeline: ingest, run, score, eval, report.

Exit codes: 0 success, 1 operational error, 2 input validation error.
Flag precedence is flags > config file > defaults; the API credential comes
only from an environment variable, never a flag.
"""

from __future__ import annotations

import functools
import json
import sys
from collections import Counter
from pathlib import Path

import click

from . import corpus, gateway, prompting, reports, scoring
from .errors import InputError, StarscoreError


def _fail(code: int, message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def handles_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except InputError as exc:
            _fail(2, str(exc))
        except StarscoreError as exc:
            _fail(1, str(exc))

    return wrapper


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise InputError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise InputError(f"config file {path} must contain a JSON object")
    return data


def _resolve(flag_value, config: dict, key: str, default):
    if flag_value is not None:
        return flag_value
    if key in config:
        return config[key]
    return default


@click.group()
@click.version_option(package_name="starscore")
def main() -> None:
    """Score article quality with LLM score-probability distributions."""


@main.command()
@click.argument("corpus_path", required=False, type=click.Path())
@click.option("--format", "fmt", type=click.Choice(["jsonl", "csv"]), default=None)
@click.option("--proxy", "proxy_path", type=click.Path(), default=None,
              help="Also validate a proxy-score CSV.")
@click.option("--drop-short-abstracts", is_flag=True,
              help="Drop the shortest 10% of abstracts per unit and rewrite the corpus.")
@click.option("--synthetic", is_flag=True, help="Generate a synthetic corpus instead of reading one.")
@click.option("--seed", type=int, default=1, show_default=True)
@click.option("--n", "n_articles", type=int, default=50, show_default=True)
@click.option("--units", default="8", show_default=True, help="Comma-separated unit numbers.")
@click.option("--out", "out_path", type=click.Path(), default=None,
              help="Where to write the synthetic/filtered corpus.")
@click.option("--proxy-out", type=click.Path(), default=None,
              help="Where to write the synthetic proxy table.")
@handles_errors
def ingest(corpus_path, fmt, proxy_path, drop_short_abstracts, synthetic,
           seed, n_articles, units, out_path, proxy_out) -> None:
    """Validate (or synthesize) a corpus and print per-unit counts."""
    if synthetic:
        try:
            unit_list = [int(u) for u in units.split(",") if u.strip()]
        except ValueError:
            raise InputError(f"--units must be comma-separated integers, got {units!r}") from None
        articles, proxy = corpus.generate_synthetic_corpus(seed, n_articles, unit_list)
        out = Path(out_path or "corpus.jsonl")
        corpus.write_corpus(articles, out)
        proxy_file = Path(proxy_out or out.with_name("proxy.csv"))
        corpus.write_proxy_scores(proxy, proxy_file)
        click.echo(f"wrote {len(articles)} synthetic articles to {out}")
        click.echo(f"wrote {len(proxy)} proxy rows to {proxy_file}")
    elif corpus_path is None:
        raise InputError("pass a corpus path or --synthetic")
    else:
        articles = corpus.load_corpus(corpus_path, fmt)
        if drop_short_abstracts:
            kept = corpus.drop_short_abstracts(articles)
            click.echo(f"dropped {len(articles) - len(kept)} short-abstract articles")
            articles = kept
            if out_path:
                corpus.write_corpus(articles, Path(out_path))
                click.echo(f"wrote filtered corpus to {out_path}")
        if proxy_path:
            proxy = corpus.load_proxy_scores(proxy_path)
            click.echo(f"{len(proxy)} proxy rows validated")

    unit_counts = Counter(a.unit for a in articles)
    panel_counts = Counter(a.main_panel for a in articles)
    click.echo(f"{len(articles)} articles, {len(unit_counts)} unit(s)")
    for unit in sorted(unit_counts):
        click.echo(f"  unit {unit:2d} (panel {corpus.main_panel_for_unit(unit)}): "
                   f"{unit_counts[unit]} articles")
    click.echo("panels: " + ", ".join(f"{p}={panel_counts[p]}" for p in sorted(panel_counts)))


_strategy_option = click.option(
    "--strategy", "strategy_name", required=True,
    type=click.Choice(["classification", "token", "standard"]),
    help="Which prompt/parse strategy to use.",
)


@main.command()
@click.option("--corpus", "corpus_path", required=True, type=click.Path())
@_strategy_option
@click.option("--store", "store_path", type=click.Path(), default=None,
              help="Append-only JSONL store of raw exchanges. [default: records.jsonl]")
@click.option("--mode", type=click.Choice(["live", "replay"]), default="live", show_default=True)
@click.option("--iterations", type=int, default=None, help="Repeat queries per article. [default: 5]")
@click.option("--model", "model_id", default=None, help="Endpoint model id.")
@click.option("--base-url", default=None, help="Chat-completion endpoint base URL.")
@click.option("--concurrency", type=int, default=None, help="Max in-flight requests. [default: 4]")
@click.option("--instructions", "instructions_dir", type=click.Path(), default=None,
              help="Directory with panel_a.txt..panel_d.txt system instructions.")
@click.option("--allow-placeholders", is_flag=True,
              help="Permit sending the placeholder instruction files.")
@click.option("--scores-out", type=click.Path(), default=None,
              help="Also parse and write the scored table here.")
@click.option("--include-out-of-tolerance", is_flag=True,
              help="Score classification tables whose percentages stray from 100.")
@click.option("--config", "config_path", type=click.Path(), default=None)
@handles_errors
def run(corpus_path, strategy_name, store_path, mode, iterations, model_id, base_url,
        concurrency, instructions_dir, allow_placeholders, scores_out,
        include_out_of_tolerance, config_path) -> None:
    """Execute or resume a scoring batch against the endpoint or the store."""
    config = _load_config(config_path)
    strategy = prompting.Strategy.from_cli(strategy_name)
    iterations = int(_resolve(iterations, config, "iterations", 5))
    store = gateway.ResponseStore(_resolve(store_path, config, "store", "records.jsonl"))
    articles = corpus.load_corpus(corpus_path)

    if mode == "live":
        instructions_dir = _resolve(instructions_dir, config, "instructions_dir", None)
        if instructions_dir:
            instructions = prompting.SystemInstructionSet.load_dir(instructions_dir)
        else:
            instructions = prompting.SystemInstructionSet.packaged_defaults()
        instructions.require_real(allow_placeholders)
        gw_config = gateway.GatewayConfig(
            base_url=_resolve(base_url, config, "base_url", gateway.GatewayConfig.base_url),
            model_id=_resolve(model_id, config, "model", gateway.GatewayConfig.model_id),
            credential_env=str(config.get("credential_env", gateway.GatewayConfig.credential_env)),
        )
        with gateway.ChatCompletionClient(gw_config) as client:
            batch = gateway.run_batch(
                articles, strategy, instructions, store, client,
                iterations=iterations,
                concurrency_limit=int(_resolve(concurrency, config, "concurrency", 4)),
            )
    else:
        batch = gateway.replay_batch(articles, strategy, store, iterations=iterations)

    click.echo(f"{batch.fetched} fetched, {batch.reused} reused from store, "
               f"{len(batch.failures)} failed")
    for failure in batch.failures[:10]:
        click.echo(f"  {failure.article_id} iter {failure.iteration}: {failure.reason}", err=True)
    if len(batch.failures) > 10:
        click.echo(f"  ... and {len(batch.failures) - 10} more", err=True)

    results = scoring.score_records(batch.records)
    flagged = sum(1 for r in results if r.flags)
    click.echo(f"scored {len(results)} iterations; {flagged} flagged")
    if scores_out:
        scoring.write_scores(results, scores_out)
        click.echo(f"wrote scored table to {scores_out}")
    if batch.failures:
        sys.exit(1)


@main.command()
@click.option("--store", "store_path", required=True, type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--strategy", "strategy_name", default=None,
              type=click.Choice(["classification", "token", "standard"]),
              help="Only score records of this strategy.")
@click.option("--include-out-of-tolerance", is_flag=True)
@handles_errors
def score(store_path, out_path, strategy_name, include_out_of_tolerance) -> None:
    """Parse every stored response into scored rows, offline."""
    store = gateway.ResponseStore(store_path)
    strategy = prompting.Strategy.from_cli(strategy_name) if strategy_name else None
    records, malformed = store.records(strategy)
    if not records and not malformed:
        raise InputError(f"store {store_path} holds no records"
                         + (f" for strategy {strategy.value}" if strategy else ""))
    results = scoring.score_records(records)
    scoring.write_scores(results, out_path)
    flagged = sum(1 for r in results if r.flags)
    click.echo(f"scored {len(results)} iterations ({flagged} flagged, "
               f"{len(malformed)} stored payloads unreadable) -> {out_path}")
    for key, reason in malformed[:10]:
        click.echo(f"  unreadable {key}: {reason}", err=True)


@main.command(name="eval")
@click.option("--scores", "scores_path", required=True, type=click.Path())
@click.option("--corpus", "corpus_path", required=True, type=click.Path())
@click.option("--proxy", "proxy_path", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--top-k", type=int, default=20, show_default=True,
              help="Profiles per histogram table.")
@click.option("--include-out-of-tolerance", is_flag=True)
@handles_errors
def eval_cmd(scores_path, corpus_path, proxy_path, out_dir, top_k,
             include_out_of_tolerance) -> None:
    """Evaluate a scored table against the proxy and write the report files."""
    results = scoring.read_scores(scores_path)
    articles = corpus.load_corpus(corpus_path)
    proxy = corpus.load_proxy_scores(proxy_path)
    report = reports.build_report(
        results, articles, proxy, top_k=top_k,
        include_out_of_tolerance=include_out_of_tolerance,
    )
    reports.write_report(report, out_dir)
    overall = report.spearman.overall
    for summary in overall:
        click.echo(
            f"{summary.strategy.value}: pooled rho_weighted="
            f"{'-' if summary.pooled_rho_weighted is None else f'{summary.pooled_rho_weighted:.4f}'} "
            f"over {summary.n_articles} articles"
        )
    click.echo(f"report written to {out_dir}/report.json, report.txt, tables/")


@main.command()
@click.option("--report", "report_path", required=True, type=click.Path(),
              help="Path to a report.json written by eval.")
@handles_errors
def report(report_path) -> None:
    """Print the plain-text tables for an existing report."""
    path = Path(report_path)
    if not path.exists():
        raise InputError(f"report file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputError(f"{path} is not valid JSON: {exc}") from exc
    click.echo(reports.render_text(data), nl=False)


if __name__ == "__main__":
    main()
