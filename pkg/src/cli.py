#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
命令行入口
子命令: synth / fuse / train / infer / eval / ablate / ttest

退出码: 0 成功, 1 运行错误, 2 用法错误；报告写标准输出，日志写标准错误
"""

import argparse
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from classicfusion import FusionParams, fuse, tune
from config import config
from dlf import DlfConfig, DlfModel, build_dlf
from errors import ConfigError, DatasetError, DlfError
from evalkit import compare_methods, errormap, evaluate, paired_ttest
from synthlab import PhantomConfig, make_dataset
from trainer import (TrainConfig, atlas_library, infer, load_any_model, load_dataset, sample_training_patches,
                     save_training, split_subjects, train_dlf, train_unet)
from unet import UNetConfig
from utils import parse_key_value_lines, setup_logger, write_run_manifest
from volcore import read_labelmap, write_labelmap, write_volume

SECTIONS = ('phantom', 'train', 'fusion', 'dlf', 'unet', 'eval')
DEFAULT_BETAS = {'svwv': (0.01, 0.05, 0.1, 0.5), 'jlf': (0.5, 1.0, 2.0, 4.0)}
DEFAULT_RADII = ((1, 1, 0), (2, 2, 1), (3, 3, 1))


# ==================== 运行配置 ====================

class EvalSettings(BaseModel):
    """评估设置"""

    model_config = ConfigDict(extra='forbid')

    gdsc_labels: Optional[List[int]] = None
    percent: bool = True

    @field_validator('gdsc_labels', mode='before')
    @classmethod
    def _split(cls, v):
        if isinstance(v, str):
            return [s for s in v.split(',') if s.strip()]
        return v


def _deep_merge(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _flatten(prefix: str, values: Dict[str, Any]) -> Dict[str, Any]:
    items = {}
    for key, value in values.items():
        if isinstance(value, dict):
            items.update(_flatten(f"{prefix}{key}.", value))
        elif isinstance(value, (list, tuple)):
            items[f"{prefix}{key}"] = ','.join(str(v) for v in value)
        else:
            items[f"{prefix}{key}"] = value
    return items


class RunConfig(BaseModel):
    """
    运行配置：分节的 key=value 覆盖项，按子命令与模型类型叠加到各自的预设上

    各节在读取时即按目标配置模型校验，未知键报错
    """

    model_config = ConfigDict(extra='forbid')

    seed: int = Field(default_factory=lambda: config.DLF_SEED)
    phantom: Dict[str, Any] = Field(default_factory=dict)
    train: Dict[str, Any] = Field(default_factory=dict)
    fusion: Dict[str, Any] = Field(default_factory=dict)
    dlf: Dict[str, Any] = Field(default_factory=dict)
    unet: Dict[str, Any] = Field(default_factory=dict)
    eval: Dict[str, Any] = Field(default_factory=dict)

    @model_validator(mode='after')
    def _validate_sections(self):
        self.phantom_config()
        self.train_config('dlf')
        self.train_config('unet')
        self.fusion_params('svwv')
        self.dlf_config(2)
        self.unet_config(2)
        self.eval_settings()
        return self

    def phantom_config(self) -> PhantomConfig:
        return PhantomConfig(**{'seed': self.seed, **self.phantom})

    def train_config(self, model: str) -> TrainConfig:
        preset = TrainConfig.dlf_preset() if model == 'dlf' else TrainConfig.unet_preset()
        values = _deep_merge(preset.model_dump(), {'seed': self.seed, **self.train})
        return TrainConfig(**values)

    def fusion_params(self, method: str) -> FusionParams:
        preset = FusionParams.jlf_preset() if method == 'jlf' else FusionParams.svwv_preset()
        return FusionParams(**{**preset.model_dump(), **self.fusion})

    def dlf_config(self, n_labels: int, drop: Sequence[str] = ()) -> DlfConfig:
        if {'n_labels', 'wv_cfg', 'ft_cfg'} & set(self.dlf):
            raise ValueError("dlf 节不能设置 n_labels / wv_cfg / ft_cfg")
        return DlfConfig(n_labels=n_labels, **self.dlf).with_ablations(drop)

    def unet_config(self, n_labels: int) -> UNetConfig:
        if {'in_channels', 'out_channels'} & set(self.unet):
            raise ValueError("unet 节不能设置 in_channels / out_channels")
        return UNetConfig(**{'in_channels': 5, 'out_channels': n_labels, 'deep_supervision': True, **self.unet})

    def eval_settings(self) -> EvalSettings:
        return EvalSettings(**self.eval)

    def items(self) -> Dict[str, Any]:
        """展开为 key=value（只含显式设置的覆盖项与种子）"""
        items: Dict[str, Any] = {'seed': self.seed}
        for section in SECTIONS:
            items.update(_flatten(f"{section}.", getattr(self, section)))
        return items


def _coerce(value: str):
    return [v.strip() for v in value.split(',')] if ',' in value else value


def parse_run_config(pairs: Sequence[Tuple[str, str]], seed: Optional[int] = None) -> RunConfig:
    """
    把 (key, value) 列表解析为 RunConfig

    Raises:
        ConfigError: 未知节、未知键或取值不合法
    """
    raw: Dict[str, Any] = {section: {} for section in SECTIONS}
    for key, value in pairs:
        if key == 'seed':
            raw['seed'] = value
            continue
        section, _, rest = key.partition('.')
        if section not in SECTIONS or not rest:
            raise ConfigError(f"未知配置键: {key}")
        node = raw[section]
        parts = rest.split('.')
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"配置键冲突: {key}")
        node[parts[-1]] = _coerce(value)
    if seed is not None:
        raw['seed'] = seed
    try:
        return RunConfig(**raw)
    except ValidationError as e:
        raise ConfigError(f"配置不合法: {e}") from e


def load_run_config(path: Optional[str], seed: Optional[int] = None) -> RunConfig:
    """读取 key=value 配置文件；path 为空时使用全部预设"""
    if not path:
        return parse_run_config([], seed)
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"配置文件不存在: {path}")
    with open(path, 'r', encoding='utf-8') as f:
        return parse_run_config(parse_key_value_lines(f, source=str(path)), seed)


# ==================== 参数解析 ====================

def _triple(text: str, minimum: int = 1) -> Tuple[int, int, int]:
    try:
        parts = [int(v) for v in text.split(',')]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"需要逗号分隔的整数: {text}") from e
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3 or min(parts) < minimum:
        raise argparse.ArgumentTypeError(f"需要 1 个或 3 个 ≥ {minimum} 的整数: {text}")
    return tuple(parts)


def _floats(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(',') if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"需要逗号分隔的数值: {text}") from e


def _radii(text: str) -> List[Tuple[int, int, int]]:
    return [_triple(part, minimum=0) for part in text.split(';') if part.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='key=value 配置文件')
    common.add_argument('--seed', type=int, help='覆盖配置中的随机种子')
    common.add_argument('--workers', type=int, help='并行线程数（缺省取 DLF_WORKERS）')
    common.add_argument('--log-level', help='日志级别')

    parser = argparse.ArgumentParser(prog='dlf', description='深度标签融合多图谱分割工具')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('synth', parents=[common], help='生成合成体模数据集')
    p.add_argument('--out', required=True, help='数据集目录')

    p = sub.add_parser('fuse', parents=[common], help='传统标签融合')
    p.add_argument('--data', required=True, help='数据集目录')
    p.add_argument('--target', required=True, help='目标受试者 ID')
    p.add_argument('--method', choices=['mv', 'svwv', 'jlf'], required=True)
    p.add_argument('--atlases', help='逗号分隔的图谱 ID（缺省为其余全部受试者）')
    p.add_argument('--tune', action='store_true', help='先在其余受试者上网格搜索 β 与搜索半径')
    p.add_argument('--betas', type=_floats, help='调参 β 候选，逗号分隔')
    p.add_argument('--radii', type=_radii, help='调参搜索半径候选，如 "1,1,0;2,2,1"')
    p.add_argument('--out', required=True, help='输出标签图')

    p = sub.add_parser('train', parents=[common], help='训练 DLF 或 U-Net')
    p.add_argument('--model', choices=['dlf', 'unet'], required=True)
    p.add_argument('--data', required=True, help='数据集目录')
    p.add_argument('--holdout', type=int, default=0, help='留作测试的末尾受试者个数')
    p.add_argument('--drop', action='append', choices=['wv', 'ft', 'mask'], default=[], help='训练消融模型')
    p.add_argument('--out', required=True, help='检查点目录')

    p = sub.add_parser('infer', parents=[common], help='稠密网格推理')
    p.add_argument('--model', required=True, help='检查点目录')
    p.add_argument('--data', required=True, help='数据集目录')
    p.add_argument('--target', required=True, help='目标受试者 ID')
    p.add_argument('--atlases', help='逗号分隔的图谱 ID（缺省为其余全部受试者）')
    p.add_argument('--patch', type=_triple, help='块大小')
    p.add_argument('--stride', type=_triple, help='网格步长（缺省为块大小的一半）')
    p.add_argument('--lcc', action='store_true', help='最大连通域后处理')
    p.add_argument('--out', required=True, help='输出标签图')

    p = sub.add_parser('ablate', parents=[common], help='关闭 DLF 组件后推理')
    p.add_argument('--drop', action='append', choices=['wv', 'ft', 'mask'], required=True)
    p.add_argument('--model', help='DLF 检查点（同时去掉 wv 与 ft 时可省略）')
    p.add_argument('--data', required=True, help='数据集目录')
    p.add_argument('--target', required=True, help='目标受试者 ID')
    p.add_argument('--atlases', help='逗号分隔的图谱 ID（缺省为其余全部受试者）')
    p.add_argument('--patch', type=_triple, help='块大小')
    p.add_argument('--stride', type=_triple, help='网格步长')
    p.add_argument('--out', required=True, help='输出标签图')

    p = sub.add_parser('eval', parents=[common], help='评估分割')
    p.add_argument('--pred', required=True, help='自动分割')
    p.add_argument('--ref', required=True, help='参考分割')
    p.add_argument('--labels', help='GDSC 标签子集，逗号分隔')
    p.add_argument('--errormap', help='输出错误图路径')

    p = sub.add_parser('ttest', parents=[common], help='配对双侧 t 检验')
    p.add_argument('--csv', help='分数表 CSV')
    p.add_argument('--x', help='第一组：CSV 列名或逗号分隔的数值')
    p.add_argument('--y', help='第二组：CSV 列名或逗号分隔的数值')
    p.add_argument('--reference', help='长表模式：参考方法名（列 method/subject/<metric>）')
    p.add_argument('--metric', default='gdsc', help='长表模式下比较的指标列')
    return parser


# ==================== 子命令 ====================

def _pick_atlases(subjects, target_id: str, ids: Optional[str], flip: bool = False):
    if ids:
        wanted = [s.strip() for s in ids.split(',') if s.strip()]
        known = {s.subject_id for s in subjects}
        unknown = [w for w in wanted if w not in known]
        if unknown:
            raise DatasetError(f"未知图谱 ID: {unknown}")
        chosen = [s for w in wanted for s in subjects if s.subject_id == w]
        return atlas_library(chosen, target_id, flip)
    return atlas_library(subjects, target_id, flip)


def _find_target(subjects, target_id: str):
    for s in subjects:
        if s.subject_id == target_id:
            return s
    raise DatasetError(f"数据集中没有受试者 {target_id}")


def _out_dir(out: str) -> Path:
    return Path(out).resolve().parent


def _echo(title: str, model: BaseModel) -> None:
    """把最终生效的配置（预设叠加覆盖项）写入日志"""
    for key, value in _flatten(f"{title}.", model.model_dump()).items():
        logger.info(f"生效配置 {key}={value}")


def cmd_synth(args, rc: RunConfig, workers: int) -> int:
    cfg = rc.phantom_config()
    _echo("phantom", cfg)
    root = make_dataset(cfg, args.out, workers)
    write_run_manifest(root, 'synth', rc.items(), cfg.seed)
    return 0


def cmd_fuse(args, rc: RunConfig, workers: int) -> int:
    subjects = load_dataset(args.data)
    target = _find_target(subjects, args.target)
    atlases = _pick_atlases(subjects, args.target, args.atlases)
    params = None
    if args.method != 'mv':
        params = rc.fusion_params(args.method)
        _echo("fusion", params)
        if args.tune:
            pool = [s for s in subjects if s.subject_id != args.target]
            if len(pool) < 2:
                raise DatasetError("调参至少需要目标之外的 2 个受试者")
            cases = [(s.images, s.labels, atlas_library(pool, s.subject_id)) for s in pool]
            label_set = rc.eval_settings().gdsc_labels or list(range(1, target.labels.n_labels))
            params, table = tune(args.method, cases, args.betas or DEFAULT_BETAS[args.method],
                                 args.radii or DEFAULT_RADII, label_set, params, workers)
            table_path = _out_dir(args.out) / f"tune_{args.method}.csv"
            table.to_csv(table_path, index=False)
            logger.info(f"调参结果: β={params.beta} 搜索半径={params.search_radius} (得分表 {table_path})")
    elif args.tune:
        logger.warning("mv 没有可调参数，忽略 --tune")

    result = fuse(args.method, target.images, atlases, params, workers)
    write_labelmap(result, args.out)
    resolved = _flatten('', params.model_dump()) if params is not None else None
    write_run_manifest(_out_dir(args.out), 'fuse', {**rc.items(), 'method': args.method}, rc.seed, resolved)
    logger.info(f"{args.method} 融合完成: {args.out} ({len(atlases)} 个图谱)")
    return 0


def cmd_train(args, rc: RunConfig, workers: int) -> int:
    subjects = load_dataset(args.data)
    train_subjects, _ = split_subjects(subjects, args.holdout)
    n_labels = subjects[0].labels.n_labels
    cfg = rc.train_config(args.model)
    _echo("train", cfg)
    samples = sample_training_patches(train_subjects, cfg, with_atlases=args.model == 'dlf', workers=workers)
    if args.model == 'dlf':
        model_cfg = rc.dlf_config(n_labels, args.drop)
        _echo("dlf", model_cfg)
        result = train_dlf(samples, model_cfg, cfg)
    else:
        if args.drop:
            raise ConfigError("--drop 只适用于 DLF")
        model_cfg = rc.unet_config(n_labels)
        _echo("unet", model_cfg)
        result = train_unet(samples, model_cfg, cfg)
    path = save_training(result, args.out)
    write_run_manifest(path, 'train', {**rc.items(), 'model': args.model, 'drop': ','.join(args.drop)}, cfg.seed,
                       _flatten('train.', cfg.model_dump()))
    return 0


def _grid(args, rc: RunConfig) -> Tuple[Tuple[int, int, int], Tuple[int, int, int]]:
    patch = args.patch or tuple(rc.train_config('dlf').patch_size)
    stride = args.stride or tuple(max(1, p // 2) for p in patch)
    return patch, stride


def cmd_infer(args, rc: RunConfig, workers: int) -> int:
    model = load_any_model(args.model)
    subjects = load_dataset(args.data)
    target = _find_target(subjects, args.target)
    atlases = None
    if isinstance(model, DlfModel):
        atlases = _pick_atlases(subjects, args.target, args.atlases, rc.train_config('dlf').flip_atlases)
    patch, stride = _grid(args, rc)
    result = infer(model, target.images, atlases, patch, stride, lcc=args.lcc, workers=workers)
    write_labelmap(result, args.out)
    write_run_manifest(_out_dir(args.out), 'infer', {**rc.items(), 'model': args.model, 'lcc': args.lcc,
                                                      'patch': patch, 'stride': stride}, rc.seed)
    return 0


def cmd_ablate(args, rc: RunConfig, workers: int) -> int:
    drop = sorted(set(args.drop))
    subjects = load_dataset(args.data)
    target = _find_target(subjects, args.target)
    n_labels = target.labels.n_labels
    if args.model:
        base = load_any_model(args.model)
        if not isinstance(base, DlfModel):
            raise ConfigError(f"{args.model} 不是 DLF 检查点")
    elif {'wv', 'ft'} <= set(drop):
        # 两个子网都关闭时参数不参与计算
        base = build_dlf(rc.dlf_config(n_labels), np.random.default_rng(rc.seed))
    else:
        raise ConfigError("只关闭部分子网时需要 --model")
    model = base.with_config(base.cfg.with_ablations(drop))
    atlases = _pick_atlases(subjects, args.target, args.atlases)
    patch, stride = _grid(args, rc)
    result = infer(model, target.images, atlases, patch, stride, workers=workers)
    write_labelmap(result, args.out)
    write_run_manifest(_out_dir(args.out), 'ablate', {**rc.items(), 'drop': ','.join(drop),
                                                       'patch': patch, 'stride': stride}, rc.seed)
    logger.info(f"消融 {drop} 推理完成: {args.out}")
    return 0


def cmd_eval(args, rc: RunConfig, workers: int) -> int:
    pred = read_labelmap(args.pred)
    ref = read_labelmap(args.ref)
    settings = rc.eval_settings()
    labels = [int(v) for v in args.labels.split(',')] if args.labels else settings.gdsc_labels
    report = evaluate(pred, ref, labels)
    for line in report.to_lines(settings.percent):
        print(line)
    if args.errormap:
        write_volume(errormap(pred, ref), args.errormap)
    return 0


def _series(df: Optional[pd.DataFrame], spec: str) -> np.ndarray:
    if df is not None:
        if spec not in df.columns:
            raise DatasetError(f"CSV 中没有列 {spec}")
        return df[spec].to_numpy(dtype=np.float64)
    try:
        return np.array([float(v) for v in spec.split(',') if v.strip()])
    except ValueError as e:
        raise ConfigError(f"无法解析数值序列: {spec}") from e


def cmd_ttest(args, rc: RunConfig, workers: int) -> int:
    df = pd.read_csv(args.csv) if args.csv else None
    if args.reference:
        if df is None:
            raise ConfigError("--reference 需要 --csv")
        table = compare_methods(df, args.reference, args.metric)
        for row in table.itertuples(index=False):
            print(f"{row.method}.mean_ref={row.mean_ref:.6f}")
            print(f"{row.method}.mean_other={row.mean_other:.6f}")
            print(f"{row.method}.t={row.t:.6g}")
            print(f"{row.method}.p={row.p:.6g}")
            print(f"{row.method}.degenerate={row.degenerate}")
        return 0
    if not args.x or not args.y:
        raise ConfigError("需要 --x 与 --y，或 --csv 与 --reference")
    result = paired_ttest(_series(df, args.x), _series(df, args.y))
    print(f"t={result.t:.6g}")
    print(f"p={result.p:.6g}")
    print(f"n={result.n}")
    print(f"mean_diff={result.mean_diff:.6g}")
    print(f"degenerate={result.degenerate}")
    return 0


COMMANDS = {
    'synth': cmd_synth,
    'fuse': cmd_fuse,
    'train': cmd_train,
    'infer': cmd_infer,
    'ablate': cmd_ablate,
    'eval': cmd_eval,
    'ttest': cmd_ttest,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    """
    执行一个子命令

    Returns:
        退出码：0 成功，1 运行错误，2 用法或配置错误
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else 2

    try:
        setup_logger(f"dlf_{args.command}", level=args.log_level)
        config.validate_config()
        config.ensure_directories()
        workers = args.workers if args.workers is not None else config.DLF_WORKERS
        if workers < 1:
            raise ConfigError(f"--workers 必须 ≥ 1: {workers}")
        rc = load_run_config(args.config, args.seed)
        logger.info(f"命令 {args.command}, workers={workers}")
        for key, value in rc.items().items():
            logger.info(f"配置 {key}={value}")
        return COMMANDS[args.command](args, rc, workers)
    except ConfigError as e:
        logger.error(f"{args.command} 配置错误: {e}")
        return 2
    except (DlfError, OSError, ValueError) as e:
        logger.error(f"{args.command} 失败: {e}")
        return 1
