"""Unified command-line entry point.

Exit codes: 0 ok, 2 configuration error, 3 quality-gate or budget failure.
Run configuration comes from --config or the CULVERTD_CONFIG environment
variable (JSON: budgets, trigger policy, dedup policy, bindings).
"""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import quant
from .bus import MessageBus
from .core import SegmentDescriptor, parse_defect_class
from .detection import DedupPolicy, DetectorProfile
from .gateway import GatewaySession
from .metrics import evaluate_corpus, tokenize
from .orchestrator import (
    BudgetSpec,
    Pipeline,
    TemplateSummarizer,
    TriggerPolicy,
)
from .simulator import PRESETS, Scenario, generate_scenario, make_preset, replay, score_run
from .summarize import RemoteSummarizer, SummarizerBinding

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_GATE = 3


class ConfigError(click.ClickException):
    exit_code = EXIT_CONFIG


def load_run_config(path: str | None) -> dict:
    path = path or os.environ.get("CULVERTD_CONFIG")
    if not path:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot load run config {path}: {exc}") from exc


def _build_components(cfg: dict, summarizer_endpoint: str | None):
    try:
        budgets = BudgetSpec.from_dict(cfg["budgets"]) if "budgets" in cfg else BudgetSpec()
        trig = cfg.get("trigger", {})
        trigger = TriggerPolicy(
            segment_length_m=float(trig.get("segment_length_m", 6.0)),
            significance_confidence=float(trig.get("significance_confidence", 0.9)),
            critical_classes=(
                frozenset(parse_defect_class(c) for c in trig["critical_classes"])
                if "critical_classes" in trig
                else TriggerPolicy().critical_classes
            ),
        )
        ded = cfg.get("dedup", {})
        dedup = DedupPolicy(
            proximity_threshold_m=float(ded.get("proximity_threshold_m", 0.5)),
            require_same_class=bool(ded.get("require_same_class", True)),
        )
        det = cfg.get("detector", {})
        profile = DetectorProfile(
            name=det.get("name", "noiseless"),
            recall=float(det.get("recall", 1.0)),
            false_positive_rate=float(det.get("false_positive_rate", 0.0)),
            confidence_sigma=float(det.get("confidence_sigma", 0.0)),
            delay_s=float(det.get("delay_s", 0.05)),
            seed=int(det.get("seed", 0)),
        )
        summ = cfg.get("summarizer", {})
        endpoint = summarizer_endpoint or summ.get("endpoint")
        if summ.get("kind", "template") == "remote" or summarizer_endpoint:
            binding = SummarizerBinding(
                kind="remote", endpoint=endpoint, timeout_s=float(summ.get("timeout_s", 10.0))
            )
            summarizer = RemoteSummarizer(binding)
        else:
            summarizer = TemplateSummarizer(delay_s=float(summ.get("delay_s", 0.0)))
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"invalid run configuration: {exc}") from exc
    return budgets, trigger, dedup, profile, summarizer


@click.group()
def main() -> None:
    """Edge inspection pipeline runtime."""


@main.command()
@click.option("--scenario", "scenario_file", type=click.Path(exists=True), help="Scenario JSON file.")
@click.option("--preset", type=click.Choice(sorted(PRESETS)), help="Built-in scenario preset.")
@click.option("--seed", type=int, default=None, help="Regenerate the preset with this seed.")
@click.option("--density", type=float, default=2.0, help="Planted defects per 10 m (presets only).")
@click.option("--realtime", is_flag=True, help="Sleep between frames at the scenario frame rate.")
@click.option("--out", "out_file", type=click.Path(), required=True, help="Report JSON output path.")
@click.option("--config", "config_file", type=click.Path(), default=None)
@click.option("--summarizer-endpoint", default=None)
@click.option("--score/--no-score", default=True, help="Score the run against ground truth.")
def simulate(scenario_file, preset, seed, density, realtime, out_file, config_file, summarizer_endpoint, score) -> None:
    """Run a scenario through the full pipeline and write the report."""
    scenario = _load_scenario(scenario_file, preset, seed, density)
    cfg = load_run_config(config_file)
    budgets, trigger, dedup, profile, summarizer = _build_components(cfg, summarizer_endpoint)
    pipeline = Pipeline(
        detector_profile=profile,
        summarizer=summarizer,
        dedup_policy=dedup,
        trigger_policy=trigger,
        budgets=budgets,
        run_id=f"sim-{scenario.seed}",
        segment=SegmentDescriptor(pipe_length_m=scenario.pipe_length_m),
        realtime=realtime,
    )
    result = pipeline.run(replay(scenario, realtime=realtime))
    Path(out_file).write_text(result.report.to_json())
    telemetry_path = Path(out_file).with_suffix(".telemetry.ndjson")
    with open(telemetry_path, "w") as f:
        for sample in result.telemetry:
            f.write(json.dumps(sample.to_dict()) + "\n")
    digest = result.report.telemetry_digest
    click.echo(
        f"run {result.report.run_id}: {digest['records']} records, "
        f"{digest['summaries']} summaries, wall {digest['wall_time_s']:.1f}s"
    )
    if score:
        run_score = score_run(result.report, scenario)
        click.echo(
            f"score: precision {run_score.precision:.3f} recall {run_score.recall:.3f} "
            f"loc-mae {run_score.localization_mae_m:.3f} m"
        )
    median = digest.get("median_end_to_end_ms")
    if median is not None and median / 1000.0 >= budgets.t_max_s:
        click.echo("budget failure: median end-to-end latency exceeds T_max", err=True)
        sys.exit(EXIT_GATE)


def _load_scenario(scenario_file, preset, seed, density) -> Scenario:
    if scenario_file:
        try:
            return Scenario.from_json(Path(scenario_file).read_text())
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"cannot load scenario {scenario_file}: {exc}") from exc
    if preset:
        if seed is not None:
            return generate_scenario(seed, PRESETS[preset]["length_m"], density)
        return make_preset(preset, density)
    raise ConfigError("either --scenario or --preset is required")


@main.command()
@click.option("--report", "report_file", type=click.Path(exists=True), required=True, help="Finished report JSON to serve.")
@click.option("--host", default="127.0.0.1")
@click.option("--port", type=int, default=8750)
@click.option("--config", "config_file", type=click.Path(), default=None)
def serve(report_file, host, port, config_file) -> None:
    """Serve the gateway API over a finished run report."""
    from .core import InspectionReport
    from .gateway import serve as serve_gateway

    load_run_config(config_file)  # validated for side effects / early errors
    try:
        report = InspectionReport.from_json(Path(report_file).read_text())
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot load report {report_file}: {exc}") from exc
    session = GatewaySession(MessageBus(), run_id=report.run_id)
    session.attach_report(report)
    # Retained buffers let late stream subscribers replay the run.
    for rec, summ in report.entries:
        session.bus.publish("detections", rec.representative.to_dict())
        if summ is not None:
            session.bus.publish("summaries", {"record_id": rec.record_id, "summary": summ.to_dict()})
    click.echo(f"serving {report.run_id} on http://{host}:{port}")
    serve_gateway(session, host=host, port=port)


def _load_tensor(path: str) -> np.ndarray:
    try:
        return np.load(path)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load tensor {path}: {exc}") from exc


@main.command()
@click.option("--in", "in_file", type=click.Path(exists=True), required=True, help="Input .npy tensor.")
@click.option("--out", "out_file", type=click.Path(), required=True, help="Quantized artifact path.")
@click.option("--scheme", type=click.Choice(["affine", "int8", "nf4"]), default="int8")
@click.option("--bits", type=int, default=8)
@click.option("--block-size", type=int, default=64)
@click.option("--scale", type=float, default=None, help="Affine scale (required for --scheme affine).")
@click.option("--zero-point", type=int, default=0)
def quantize(in_file, out_file, scheme, bits, block_size, scale, zero_point) -> None:
    """Quantize a tensor and write the artifact file."""
    tensor = _load_tensor(in_file)
    try:
        if scheme == "affine":
            if scale is None:
                raise ConfigError("--scale is required for the affine scheme")
            q = quant.affine_quantize(tensor, scale, zero_point, bits)
        elif scheme == "int8":
            _, q = quant.calibrate_symmetric_per_channel(np.atleast_2d(tensor), bits=bits)
        else:
            q = quant.nf4_quantize(tensor, block_size=block_size)
    except (quant.NonPositiveScale, quant.NonFiniteInput, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    quant.save_quantized(out_file, q)
    click.echo(f"wrote {out_file}: {q.spec.scheme}, {q.codes.size} codes")


@main.command()
@click.option("--in", "in_file", type=click.Path(exists=True), required=True, help="Quantized artifact.")
@click.option("--out", "out_file", type=click.Path(), required=True, help="Output .npy tensor.")
def dequantize(in_file, out_file) -> None:
    """Reconstruct a tensor from a quantized artifact."""
    q = quant.load_quantized(in_file)
    np.save(out_file, quant.dequantize(q))
    click.echo(f"wrote {out_file}: shape {q.shape}")


@main.command("merge-adapter")
@click.option("--base", type=click.Path(exists=True), required=True, help="Base weights .npy.")
@click.option("--lora-b", type=click.Path(exists=True), required=True)
@click.option("--lora-a", type=click.Path(exists=True), required=True)
@click.option("--alpha", type=float, default=32.0)
@click.option("--out", "out_file", type=click.Path(), required=True)
def merge_adapter(base, lora_b, lora_a, alpha, out_file) -> None:
    """Fold a low-rank adapter into base weights."""
    w0 = _load_tensor(base)
    b = _load_tensor(lora_b)
    a = _load_tensor(lora_a)
    try:
        adapter = quant.LoraAdapter(B=b, A=a, rank=b.shape[1], alpha=alpha)
        merged = quant.merge_lora(w0, adapter)
    except (quant.ShapeMismatch, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    np.save(out_file, merged)
    click.echo(f"wrote {out_file}: shape {merged.shape}")


@main.command("select-config")
@click.option("--candidates", type=click.Path(exists=True), required=True, help="JSON list of model configs.")
@click.option("--budget-file", type=click.Path(exists=True), required=True, help="Budget JSON.")
@click.option("--lambda-params", type=float, default=0.0)
@click.option("--lambda-latency", type=float, default=0.0)
@click.option("--lambda-memory", type=float, default=0.0)
def select_config(candidates, budget_file, lambda_params, lambda_latency, lambda_memory) -> None:
    """Pick the best configuration under the deployment budgets."""
    try:
        configs = [quant.ModelConfig.from_dict(d) for d in json.loads(Path(candidates).read_text())]
        budgets = BudgetSpec.from_dict(json.loads(Path(budget_file).read_text()))
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    weights = quant.ObjectiveWeights(
        lambda_params=lambda_params,
        lambda_latency=lambda_latency,
        lambda_memory=lambda_memory,
    )
    try:
        chosen = quant.select_configuration(configs, budgets, weights)
    except quant.NoFeasibleCandidate as exc:
        click.echo(f"no feasible candidate: {exc}", err=True)
        sys.exit(EXIT_GATE)
    click.echo(json.dumps(chosen.to_dict(), indent=2))


@main.command()
@click.option("--hyp", type=click.Path(exists=True), help="Hypotheses, one summary per line.")
@click.option("--ref", type=click.Path(exists=True), help="References, one summary per line.")
@click.option("--corpus-json", type=click.Path(exists=True), help='JSON [{"hyp": ..., "refs": [...]}].')
def evaluate(hyp, ref, corpus_json) -> None:
    """Score summaries and emit a metric report as JSON."""
    if corpus_json:
        try:
            items = json.loads(Path(corpus_json).read_text())
            pairs = [
                (tokenize(item["hyp"]), [tokenize(r) for r in item["refs"]]) for item in items
            ]
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"bad corpus file: {exc}") from exc
    elif hyp and ref:
        hyp_lines = Path(hyp).read_text().splitlines()
        ref_lines = Path(ref).read_text().splitlines()
        if len(hyp_lines) != len(ref_lines):
            raise ConfigError("hypothesis and reference files must have the same line count")
        pairs = [(tokenize(h), [tokenize(r)]) for h, r in zip(hyp_lines, ref_lines)]
    else:
        raise ConfigError("provide --hyp and --ref, or --corpus-json")
    if not pairs:
        raise ConfigError("empty evaluation corpus")
    click.echo(json.dumps(evaluate_corpus(pairs).to_dict(), indent=2))


@main.command()
@click.option("--in", "in_file", type=click.Path(exists=True), required=True, help="Report JSON.")
def report(in_file) -> None:
    """Render a report file as readable text."""
    from .core import InspectionReport

    try:
        doc = InspectionReport.from_json(Path(in_file).read_text())
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot load report {in_file}: {exc}") from exc
    click.echo(f"Inspection report {doc.run_id}")
    click.echo(
        f"Pipe: {doc.segment.pipe_length_m:g} m {doc.segment.material}; "
        f"{len(doc.entries)} deficiency record(s)"
    )
    for rec, summ in doc.entries:
        click.echo(
            f"\n[{rec.record_id}] {rec.defect_class.value} at {rec.first_pose.chainage:.2f} m "
            f"(confidence {rec.representative.confidence:.2f}, {rec.member_count} sightings)"
        )
        click.echo(summ.full_text if summ is not None else "  summary pending")


if __name__ == "__main__":
    main()
