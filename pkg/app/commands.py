# app/commands.py
import os
from typing import Any, Dict, Optional, Sequence

import click
import numpy as np
from flask import Blueprint, current_app
from werkzeug.utils import secure_filename

from .config import RunConfig, configure_logging, parse_config, parse_overrides
from .services import (
    GraspDataset,
    GraspError,
    GraspSynthesizer,
    SearchCache,
    export_grasp_objs,
    get_index,
    load_hand,
    load_object_samples,
    patch_nbytes,
    validate_dataset,
    write_reference_assets,
)

bp = Blueprint("main", __name__, cli_group=None)

PATCH_BYTES_CEILING = 12 * 1024 * 1024


def load_run_config(config_path: Optional[str], flags: Dict[str, Any], sets: Sequence[str],
                    require: Sequence[str] = ()) -> RunConfig:
    """앱 기본 설정 파일 < --config < 플래그 < --set"""
    path = config_path or current_app.config.get("CONFIG_PATH")
    overrides = dict(current_app.config.get("CONFIG_OVERRIDES") or {})
    overrides.update(parse_overrides(sets))
    config = parse_config(path, flags, overrides, require)
    configure_logging(config.log_level)
    return config


def output_prefix(config: RunConfig) -> str:
    hand = os.path.splitext(os.path.basename(config.hand))[0]
    obj = os.path.splitext(os.path.basename(config.object))[0]
    return secure_filename(f"{hand}_{obj}_s{config.seed}")


# ========= Command bodies =========
def cmd_synthesize(config: RunConfig) -> int:
    """배치 합성 실행 후 데이터셋/프로파일/로드 리포트/HTML 저장. 유효 그래스프가 있으면 0"""
    os.makedirs(config.out, exist_ok=True)
    synthesizer = GraspSynthesizer(config, SearchCache() if config.cache else None)
    results = synthesizer.synthesize()

    prefix = os.path.join(config.out, output_prefix(config))
    synthesizer.save_dataset(results, f"{prefix}_grasps.jsonl")
    synthesizer.save_json_results(results["profile"], f"{prefix}_profile.json")
    synthesizer.save_json_results(results["load_report"], f"{prefix}_load_report.json")
    synthesizer.save_html_report(results, f"{prefix}_report.html")

    dataset = results["dataset"]
    if config.export_obj and len(dataset):
        model = load_hand(config.hand)
        mesh, _ = load_object_samples(config)
        export_grasp_objs(model, dataset.grasps, mesh, f"{prefix}_obj")

    summary = results["summary"]
    current_app.logger.info(f"synthesis done: valid={summary['valid_grasps']} "
                            f"attempted={summary['attempted']} sps={results['profile']['sps']:.3f}")
    click.echo(f"valid grasps: {summary['valid_grasps']} / {summary['attempted']}")
    click.echo(f"dataset: {prefix}_grasps.jsonl")
    return 0 if len(dataset) > 0 else 1


def cmd_build_index(config: RunConfig) -> int:
    """접촉장 인덱스 생성/캐시 저장 + 패치별 메모리 출력. 상한 초과 시 1"""
    model = load_hand(config.hand)
    links = list(config.contact_links) if config.contact_links else None
    index = get_index(model, config.contact_field_params(), config.seed, links,
                      config, SearchCache())
    nbytes = patch_nbytes(index)

    for patch, size in enumerate(nbytes):
        link = index.link_names[index.patch_link[patch]]
        click.echo(f"patch {patch:4d} link={link} bytes={int(size)}")
    peak = int(nbytes.max(initial=0))
    click.echo(f"patches={index.n_patches} boxes={index.n_boxes} "
               f"max_patch_bytes={peak} mean_patch_bytes={float(np.mean(nbytes)) if len(nbytes) else 0.0:.0f}")
    if peak > PATCH_BYTES_CEILING:
        click.echo(f"patch memory ceiling exceeded: {peak} > {PATCH_BYTES_CEILING}", err=True)
        return 1
    return 0


def cmd_validate(dataset_path: str, config: RunConfig) -> int:
    """데이터셋의 모든 그래스프를 처음부터 재검증. 모두 통과하면 0"""
    dataset = GraspDataset.load(dataset_path)
    if len(dataset) == 0:
        click.echo(f"empty dataset: {dataset_path}", err=True)
        return 1

    model = load_hand(config.hand)
    _, samples = load_object_samples(config)
    results = validate_dataset(model, dataset.grasps, samples, config.epsilon,
                               config.stability_params(), config.margin, config.contact_tolerance)
    failed = [r for r in results if not r.passed]
    for r in failed:
        click.echo(f"grasp {r.index}: {'; '.join(r.failures)}", err=True)
    click.echo(f"validated {len(results)} grasps, {len(failed)} failed")
    return 0 if not failed else 1


# ========= CLI wiring =========
def _common_options(func):
    options = [
        click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                     help="INI 설정 파일"),
        click.option("--hand", default=None, help="핸드 URDF 경로"),
        click.option("--object", "object_", default=None, help="오브젝트 OBJ/STL 경로"),
        click.option("--seed", type=int, default=None),
        click.option("--set", "sets", multiple=True, help="key=value 설정 덮어쓰기 (여러 번 가능)"),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def _run(ctx: click.Context, body, *args) -> None:
    try:
        code = body(*args)
    except GraspError as e:
        current_app.logger.exception(e)
        click.echo(f"error: {e}", err=True)
        code = 2
    ctx.exit(code)


@bp.cli.command("synthesize")
@_common_options
@click.option("--batch", type=int, default=None)
@click.option("--out", default=None, help="출력 디렉터리")
@click.option("--workers", type=int, default=None)
@click.option("--export-obj", "export_obj", is_flag=True, default=None)
@click.pass_context
def synthesize_command(ctx, config_path, hand, object_, seed, sets, batch, out, workers, export_obj):
    """그래스프 배치 합성"""
    flags = {"hand": hand, "object": object_, "seed": seed, "batch": batch, "out": out,
             "workers": workers, "export_obj": export_obj}
    try:
        config = load_run_config(config_path, flags, sets, require=("hand", "object"))
    except GraspError as e:
        click.echo(f"error: {e}", err=True)
        ctx.exit(2)
    _run(ctx, cmd_synthesize, config)


@bp.cli.command("build-index")
@_common_options
@click.pass_context
def build_index_command(ctx, config_path, hand, object_, seed, sets):
    """접촉장 인덱스 캐시 생성"""
    try:
        config = load_run_config(config_path, {"hand": hand, "object": object_, "seed": seed},
                                 sets, require=("hand",))
    except GraspError as e:
        click.echo(f"error: {e}", err=True)
        ctx.exit(2)
    _run(ctx, cmd_build_index, config)


@bp.cli.command("validate")
@click.argument("dataset", type=click.Path(dir_okay=False))
@_common_options
@click.pass_context
def validate_command(ctx, dataset, config_path, hand, object_, seed, sets):
    """데이터셋 재검증"""
    try:
        config = load_run_config(config_path, {"hand": hand, "object": object_, "seed": seed},
                                 sets, require=("hand", "object"))
    except GraspError as e:
        click.echo(f"error: {e}", err=True)
        ctx.exit(2)
    _run(ctx, cmd_validate, dataset, config)


@bp.cli.command("make-assets")
@click.argument("output_dir", type=click.Path(file_okay=False))
def make_assets_command(output_dir):
    """기준 테스트 에셋 (2지/4지 핸드, 구/박스) 생성"""
    for name, path in write_reference_assets(output_dir).items():
        click.echo(f"{name}: {path}")
