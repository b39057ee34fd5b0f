import sys
from pathlib import Path

# 添加 backend 目录到 Python 路径，支持直接运行 python app/main.py
backend_dir = Path(__file__).parent.parent
if str(backend_dir) not in sys.path:
    sys.path.insert(0, str(backend_dir))

import argparse
import logging
import os
from typing import List, Optional

from dotenv import load_dotenv

from app import __version__
from app.api import commands
from app.api.experiments import PANELS
from app.errors import MTALError
from app.mtal.gradcheck import DEFAULT_TOLERANCE
from app.synth.correlation import CORRELATION_PRESETS

load_dotenv(backend_dir / ".env")

logger = logging.getLogger("app")

SEEDED_COMMANDS = ("simulate", "train", "evaluate", "gradcheck", "sweep", "experiment")


def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("训练超参数")
    group.add_argument("--beta", type=float, help="对抗项权重 β")
    group.add_argument("--lambda", dest="lam", type=float, help="L2 系数 λ")
    group.add_argument("--alpha", type=float, help="L1 系数 α")
    group.add_argument("--layers", type=int, help="每个头的隐藏层数")
    group.add_argument("--width", type=int, help="隐藏层宽度")
    group.add_argument("--units-per-group", type=int, help="批次中每组单元数 m")
    group.add_argument("--generator-steps", type=int, help="每步判别器更新对应的生成器步数 G")
    group.add_argument("--max-epochs", type=int, help="最大训练轮数")
    group.add_argument("--patience", type=int, help="早停耐心轮数")
    group.add_argument("--warmup-epochs", type=int, help="预热轮数，期间不记录最优快照也不计耐心")
    group.add_argument("--learning-rate", type=float, help="Adam 学习率")
    group.add_argument("--dropout", type=float, help="dropout 比例")
    group.add_argument("--no-feature-selection", action="store_true", help="去掉一对一特征选择层")


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON 配置文件，命令行参数优先")
    parser.add_argument("--out", help="输出目录（默认 <run-dir>/<命令名>）")
    parser.add_argument("--seed", type=int, help="随机种子（默认读取 MTAL_SEED）")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtal", description="MTAL 篮子试验反事实结果估计工具")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--run-dir", default=os.getenv("MTAL_RUN_DIR", "runs"), help="默认输出根目录")
    parser.add_argument("--log-level", default=os.getenv("MTAL_LOG_LEVEL", "INFO"), help="日志级别")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="生成合成篮子试验数据")
    _add_common(p)
    p.add_argument("--groups", type=int, help="肿瘤类型数 K")
    p.add_argument("--units", type=int, help="每组样本量 n_k")
    p.add_argument("--block-dim", type=int, help="每组预测变量块维度 d_k")
    p.add_argument("--bias", type=float, help="非参照组的均值偏移 c")
    p.add_argument("--rho-max", type=float)
    p.add_argument("--rho-min", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--delta", type=float, help="跨块相关 δ")
    p.add_argument("--preset", choices=list(CORRELATION_PRESETS), help="相关结构预设")
    p.set_defaults(handler=commands.cmd_simulate)

    p = sub.add_parser("train", help="训练 MTAL")
    p.add_argument("dataset", help="数据表、合成运行目录、IHDP 目录或 .npz")
    p.add_argument("--replicate", type=int, default=0, help="IHDP 重复编号")
    p.add_argument("--schema", help="TableSchema JSON：自定义数据表的列定义")
    _add_common(p)
    _add_train_flags(p)
    p.set_defaults(handler=commands.cmd_train)

    p = sub.add_parser("evaluate", help="推断反事实并计算指标")
    p.add_argument("dataset")
    p.add_argument("--model", help="模型存档 model.zip")
    p.add_argument("--replicate", type=int, default=0)
    p.add_argument("--schema", help="TableSchema JSON：自定义数据表的列定义")
    p.add_argument("--estimator", choices=["mtal", "knn", "mean", "factual"])
    p.add_argument("--baselines", action="store_true", help="同时报告 kNN 与组均值基线")
    p.add_argument("--neighbors", type=int, default=5, help="kNN 近邻数")
    p.add_argument("--metrics", default="auto", help="逗号分隔: pehe,ate,mse,tgor")
    p.add_argument("--subset", choices=["all", "train", "validation", "test"])
    p.add_argument("--response-threshold", type=float, help="TGOR 响应阈值")
    p.add_argument("--format", choices=["csv", "json"], default="csv")
    _add_common(p)
    p.set_defaults(handler=commands.cmd_evaluate)

    p = sub.add_parser("gradcheck", help="有限差分梯度检查")
    _add_common(p)
    p.add_argument("--count", type=int, default=5, help="从 --seed 开始检查的种子个数")
    p.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE)
    p.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(handler=commands.cmd_gradcheck)

    p = sub.add_parser("sweep", help="超参数网格搜索")
    p.add_argument("dataset")
    p.add_argument("--replicate", type=int, default=0)
    p.add_argument("--schema", help="TableSchema JSON：自定义数据表的列定义")
    p.add_argument("--grid", help="SweepGrid JSON；缺省为完整搜索范围")
    p.add_argument("--sample", type=int, help="随机抽取的格点数")
    p.add_argument("--seeds", type=int, nargs="+", help="每个格点使用的种子")
    p.add_argument("--workers", type=int, default=1)
    _add_common(p)
    _add_train_flags(p)
    p.set_defaults(handler=commands.cmd_sweep)

    p = sub.add_parser("experiment", help="生成绘图面板表格")
    p.add_argument("--panel", choices=list(PANELS), required=True)
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--units", type=int, default=500)
    p.add_argument("--block-dim", type=int, default=10)
    p.add_argument("--bias", type=float, default=0.5)
    _add_common(p)
    _add_train_flags(p)
    p.set_defaults(handler=commands.cmd_experiment)

    p = sub.add_parser("summarize", help="汇总多个报告文件（均值 ± 标准差）")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out")
    p.set_defaults(handler=commands.cmd_summarize)

    p = sub.add_parser("rerun", help="按运行清单重新执行")
    p.add_argument("manifest", help="manifest.json 或其所在目录")
    p.set_defaults(handler=commands.cmd_rerun)
    return parser


def _resolve(args: argparse.Namespace, argv: List[str]) -> List[str]:
    """补全默认种子与输出目录，并把它们写回记录的参数，使清单可以独立复现"""
    recorded = list(argv)
    if args.command in SEEDED_COMMANDS:
        if args.seed is None:
            args.seed = int(os.getenv("MTAL_SEED", "0"))
            recorded += ["--seed", str(args.seed)]
        if args.out is None:
            args.out = str(Path(args.run_dir) / args.command)
            recorded += ["--out", args.out]
    return recorded


def _configure_logging(level: str) -> None:
    root = logging.getLogger()
    if not root.handlers:
        logging.basicConfig(format="[%(levelname)s] %(message)s")
    root.setLevel(level.upper())


def run(argv: Optional[List[str]] = None) -> int:
    """解析参数并执行子命令，返回退出码"""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    _configure_logging(args.log_level)
    args.argv = _resolve(args, argv)
    print("=" * 50)
    print(f"执行 {args.command} ...")
    print("=" * 50)
    try:
        code = args.handler(args)
    except MTALError as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"{args.command} 失败")
        return 1
    print(f"{args.command} 完成" if code == 0 else f"{args.command} 失败")
    return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
