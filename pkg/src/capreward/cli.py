"""Operator CLI: QA generation, filtering, scoring, dedup, evaluation, serving.

Exit codes are stable: 0 success, 1 partial data failure, 2
configuration/usage error. Every data-producing subcommand writes a
schema-validated run manifest next to its outputs.
"""

from __future__ import annotations

import json
import sys
from collections import defaultdict
from pathlib import Path

import click

from .config import EngineConfig, load_engine_config
from .curation import (
    EmbeddingRecord,
    GenSpec,
    ImageRef,
    dedup_by_embedding,
    flag_benchmark_overlap,
    generate_qa_batch,
)
from .errors import CapRewardError, ConfigError, ScoringError, ValidationError
from .filtering import FilterConfig, filter_qa_set
from .jsonl import read_jsonl, write_jsonl
from .manifest import ManifestWriter
from .mcq import MCQ
from .prism import (
    EvalItem,
    aggregate,
    render_summary_table,
    run_answer_stage,
    run_caption_stage,
)
from .reward import CaptionSample, RewardConfig, score_group


def _config_fail(message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(2)


def _load_config(path: str) -> EngineConfig:
    try:
        return load_engine_config(path)
    except ConfigError as exc:
        _config_fail(str(exc))


def _backend(config: EngineConfig, name: str):
    try:
        return config.backend(name)
    except ConfigError as exc:
        _config_fail(str(exc))


def _load_images(path: str) -> list[ImageRef]:
    try:
        return [ImageRef.from_dict(d) for d in read_jsonl(path)]
    except (ValidationError, OSError) as exc:
        _config_fail(f"images manifest: {exc}")


def _load_mcqs(path: str) -> list[MCQ]:
    try:
        return [MCQ.from_dict(d) for d in read_jsonl(path)]
    except (ValidationError, OSError) as exc:
        _config_fail(f"qa file: {exc}")


@click.group()
def main() -> None:
    """Caption-utility reward engine."""


@main.command("gen-qa")
@click.option("--images", "images_path", required=True, type=click.Path(exists=True))
@click.option("--per-image", default=5, show_default=True, type=int)
@click.option("--option-count", default=4, show_default=True, type=int)
@click.option("--backend", "backend_name", required=True)
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--max-fail-rate", default=0.5, show_default=True, type=float)
@click.option("--out", "out_path", required=True, type=click.Path())
def cmd_gen_qa(images_path, per_image, option_count, backend_name, config_path,
               seed, max_fail_rate, out_path):
    """Generate multiple-choice questions for each image in a manifest."""
    config = _load_config(config_path)
    generator = _backend(config, backend_name)
    images = _load_images(images_path)
    try:
        spec = GenSpec(per_image=per_image, option_count=option_count)
    except ValidationError as exc:
        _config_fail(str(exc))
    if not generator.profile.vision_capable:
        _config_fail(f"backend {backend_name!r} is not vision-capable")
    manifest = ManifestWriter(
        {"per_image": per_image, "option_count": option_count, "backend": backend_name},
        {"seed": seed},
    )
    manifest.add_input(images_path)
    mcqs, rejections, failures = generate_qa_batch(images, spec, generator, seed=seed)
    out_path = Path(out_path)
    write_jsonl(out_path, (m.to_dict() for m in mcqs))
    rejections_path = out_path.with_suffix(".rejections.jsonl")
    write_jsonl(rejections_path, rejections + failures)
    manifest.add_output(out_path)
    manifest.add_output(rejections_path)
    manifest.write(out_path.with_suffix(".manifest.json"), backends=[generator])
    click.echo(
        f"generated {len(mcqs)} questions from {len(images)} images "
        f"({len(rejections)} rejections, {len(failures)} failed images)"
    )
    if images and len(failures) / len(images) > max_fail_rate:
        click.echo("error: failure rate above --max-fail-rate", err=True)
        sys.exit(1)


@main.command("filter")
@click.option("--qa", "qa_path", required=True, type=click.Path(exists=True))
@click.option("--images", "images_path", required=True, type=click.Path(exists=True))
@click.option("--k", "k_rounds", default=4, show_default=True, type=int)
@click.option("--tau-img", default=0.75, show_default=True, type=float)
@click.option("--tau-blind", default=0.25, show_default=True, type=float)
@click.option("--backend", "backend_name", required=True)
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out-dir", "out_dir", required=True, type=click.Path())
def cmd_filter(qa_path, images_path, k_rounds, tau_img, tau_blind, backend_name,
               config_path, seed, out_dir):
    """Partition questions into kept / dropped / errored by leakage probing."""
    config = _load_config(config_path)
    prober = _backend(config, backend_name)
    try:
        filter_config = FilterConfig(
            k_rounds=k_rounds, tau_img=tau_img, tau_blind=tau_blind, global_seed=seed
        )
    except ValidationError as exc:
        _config_fail(str(exc))
    mcqs = _load_mcqs(qa_path)
    images = {img.image_id: img for img in _load_images(images_path)}
    missing = [m.id for m in mcqs if m.image_id not in images]
    dataset = [
        (m, images[m.image_id].uri) for m in mcqs if m.image_id in images
    ]
    manifest = ManifestWriter(
        {
            "k_rounds": k_rounds, "tau_img": tau_img, "tau_blind": tau_blind,
            "backend": backend_name,
        },
        {"seed": seed},
    )
    manifest.add_input(qa_path)
    manifest.add_input(images_path)
    try:
        kept, dropped, errored, summary = filter_qa_set(dataset, filter_config, prober)
    except ValidationError as exc:
        _config_fail(str(exc))
    errored = errored + [{"mcq_id": mid, "error": "image not in manifest"} for mid in missing]
    summary.errored += len(missing)
    summary.total += len(missing)
    out_dir = Path(out_dir)
    paths = {
        "kept": out_dir / "kept.jsonl",
        "dropped": out_dir / "dropped.jsonl",
        "errored": out_dir / "errored.jsonl",
    }
    write_jsonl(paths["kept"], (v.to_dict() for v in kept))
    write_jsonl(paths["dropped"], (v.to_dict() for v in dropped))
    write_jsonl(paths["errored"], sorted(errored, key=lambda e: e["mcq_id"]))
    summary_path = out_dir / "summary.json"
    summary_path.write_text(
        json.dumps(summary.to_dict(filter_config), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    for path in [*paths.values(), summary_path]:
        manifest.add_output(path)
    manifest.write(out_dir / "manifest.json", backends=[prober])
    click.echo(
        f"kept {summary.kept}/{summary.total} "
        f"(unanswerable {summary.dropped_unanswerable}, leaky {summary.dropped_leaky}, "
        f"errored {summary.errored})"
    )
    if summary.errored:
        sys.exit(1)


@main.command("score")
@click.option("--captions", "captions_path", required=True, type=click.Path(exists=True))
@click.option("--qa", "qa_path", required=True, type=click.Path(exists=True))
@click.option("--n", "n_rounds", required=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--mode", "sampling_mode", default="coverage_first", show_default=True,
              type=click.Choice(["coverage_first", "with_replacement"]))
@click.option("--backend", "backend_name", required=True)
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
def cmd_score(captions_path, qa_path, n_rounds, seed, sampling_mode, backend_name,
              config_path, out_path):
    """Score caption groups (grouped by image_id) against their questions."""
    config = _load_config(config_path)
    answerer = _backend(config, backend_name)
    try:
        reward_config = RewardConfig(
            n_rounds=n_rounds, sampling_mode=sampling_mode, global_seed=seed
        )
    except ValidationError as exc:
        _config_fail(str(exc))
    mcqs = _load_mcqs(qa_path)
    questions_by_image: dict[str, list[MCQ]] = defaultdict(list)
    for mcq in mcqs:
        questions_by_image[mcq.image_id].append(mcq)
    groups: dict[str, list[CaptionSample]] = defaultdict(list)
    try:
        for record in read_jsonl(captions_path):
            groups[record["image_id"]].append(
                CaptionSample(
                    caption_id=record["caption_id"],
                    image_id=record["image_id"],
                    text=record["text"],
                    rollout_index=int(record.get("rollout_index", 0)),
                )
            )
    except (KeyError, ValidationError) as exc:
        _config_fail(f"captions file: {exc}")
    manifest = ManifestWriter(
        {"n_rounds": n_rounds, "sampling_mode": sampling_mode, "backend": backend_name},
        {"seed": seed},
    )
    manifest.add_input(captions_path)
    manifest.add_input(qa_path)
    outputs = []
    failures = 0
    for image_id in sorted(groups):
        try:
            reports, advantage = score_group(
                groups[image_id],
                questions_by_image.get(image_id, []),
                reward_config,
                answerer,
                group_id=image_id,
            )
        except (ScoringError, ValidationError) as exc:
            failures += 1
            outputs.append({"image_id": image_id, "error": str(exc)})
            continue
        outputs.append(
            {
                "image_id": image_id,
                "rewards": list(advantage.rewards),
                "advantages": list(advantage.advantages),
                "reports": [r.to_dict() for r in reports],
            }
        )
    out_path = Path(out_path)
    write_jsonl(out_path, outputs)
    manifest.add_output(out_path)
    manifest.write(out_path.with_suffix(".manifest.json"), backends=[answerer])
    click.echo(f"scored {len(groups) - failures}/{len(groups)} groups")
    if failures:
        sys.exit(1)


@main.command("dedup")
@click.option("--embeddings", "embeddings_path", required=True, type=click.Path(exists=True))
@click.option("--threshold", default=0.92, show_default=True, type=float)
@click.option("--benchmark", "benchmark_path", type=click.Path(exists=True))
@click.option("--benchmark-threshold", default=0.92, show_default=True, type=float)
@click.option("--out", "out_path", required=True, type=click.Path())
def cmd_dedup(embeddings_path, threshold, benchmark_path, benchmark_threshold, out_path):
    """Semantic dedup of image embeddings, with optional benchmark-overlap flags."""
    try:
        records = [EmbeddingRecord.from_dict(d) for d in read_jsonl(embeddings_path)]
    except ValidationError as exc:
        _config_fail(f"embeddings: {exc}")
    manifest = ManifestWriter(
        {"threshold": threshold, "benchmark_threshold": benchmark_threshold}, {}
    )
    manifest.add_input(embeddings_path)
    try:
        kept, duplicates = dedup_by_embedding(records, threshold)
        flagged: set[str] = set()
        if benchmark_path:
            benchmark = [EmbeddingRecord.from_dict(d) for d in read_jsonl(benchmark_path)]
            manifest.add_input(benchmark_path)
            flagged = flag_benchmark_overlap(records, benchmark, benchmark_threshold)
    except ValidationError as exc:
        _config_fail(str(exc))
    result = {
        "kept": sorted(kept - flagged),
        "duplicates": duplicates,
        "flagged_benchmark_overlap": sorted(flagged),
        # Thresholds are artifact choices, recorded for downstream audit.
        "threshold": threshold,
        "benchmark_threshold": benchmark_threshold,
    }
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(json.dumps(result, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    manifest.add_output(out_path)
    manifest.write(out_path.with_suffix(".manifest.json"))
    click.echo(
        f"kept {len(result['kept'])}/{len(records)} "
        f"({len(duplicates)} duplicates, {len(flagged)} benchmark overlaps)"
    )


@main.command("eval-prism")
@click.option("--benchmark", "benchmark_path", required=True, type=click.Path(exists=True))
@click.option("--images", "images_path", required=True, type=click.Path(exists=True))
@click.option("--captioner", "captioner_name", required=True)
@click.option("--answerer", "answerer_name", required=True)
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", "out_dir", required=True, type=click.Path())
def cmd_eval_prism(benchmark_path, images_path, captioner_name, answerer_name,
                   config_path, seed, out_dir):
    """Two-stage captioner evaluation: caption images, answer questions blind."""
    config = _load_config(config_path)
    captioner = _backend(config, captioner_name)
    answerer = _backend(config, answerer_name)
    if not captioner.profile.vision_capable:
        _config_fail(f"captioner {captioner_name!r} is not vision-capable")
    try:
        items = [EvalItem.from_dict(d) for d in read_jsonl(benchmark_path)]
    except ValidationError as exc:
        _config_fail(f"benchmark file: {exc}")
    images = _load_images(images_path)
    needed = {item.image_id for item in items}
    images = [img for img in images if img.image_id in needed]
    manifest = ManifestWriter(
        {"captioner": captioner_name, "answerer": answerer_name}, {"seed": seed}
    )
    manifest.add_input(benchmark_path)
    manifest.add_input(images_path)
    captions, caption_failures = run_caption_stage(images, captioner, seed=seed)
    results = run_answer_stage(
        captions, items, answerer, seed=seed, captioner_profile=captioner_name
    )
    summary = aggregate(results) if results else {"benchmarks": {}, "macro_average": None}
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    captions_path = out_dir / "captions.jsonl"
    write_jsonl(
        captions_path,
        ({"image_id": iid, "caption": text} for iid, text in sorted(captions.items())),
    )
    results_path = out_dir / "results.json"
    results_path.write_text(
        json.dumps(
            {
                "results": {name: r.to_dict() for name, r in results.items()},
                "summary": summary,
                "caption_failures": caption_failures,
                "caption_prompt": "default",
            },
            indent=2,
            sort_keys=True,
        )
        + "\n",
        encoding="utf-8",
    )
    table_path = out_dir / "table.txt"
    if results:
        table_path.write_text(render_summary_table(summary) + "\n", encoding="utf-8")
    for path in (captions_path, results_path):
        manifest.add_output(path)
    manifest.write(out_dir / "manifest.json", backends=[captioner, answerer])
    if results:
        click.echo(render_summary_table(summary))
    if caption_failures:
        sys.exit(1)


@main.command("serve")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--host", default=None)
@click.option("--port", default=None, type=int)
def cmd_serve(config_path, host, port):
    """Run the reward/filtering HTTP service."""
    import uvicorn

    from .service import create_app

    config = _load_config(config_path)
    app = create_app(config)
    uvicorn.run(
        app,
        host=host or config.host,
        port=port if port is not None else config.port,
        log_level="info",
    )


if __name__ == "__main__":
    main()
