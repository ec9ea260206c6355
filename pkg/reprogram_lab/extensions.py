import logging
import os
import sys
from datetime import datetime
from typing import Iterable, Optional, TypeVar

from tqdm import tqdm

from reprogram_lab.config import LOG_DIR

T = TypeVar("T")

logger = logging.getLogger("reprogram_lab")

_progress_enabled = True


def setup_logging(log_dir: Optional[str] = None, verbose: bool = False, quiet: bool = False) -> str:
    """配置日志：写入 logs/ 下带时间戳的文件，同时输出到终端"""
    global _progress_enabled
    log_dir = log_dir or LOG_DIR
    os.makedirs(log_dir, exist_ok=True)
    log_file = os.path.join(log_dir, f'reprogram_lab_{datetime.now().strftime("%Y%m%d_%H%M%S")}.log')

    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(log_file),
            logging.StreamHandler()
        ]
    )
    _progress_enabled = not quiet
    return log_file


def progress(iterable: Iterable[T], desc: str, total: Optional[int] = None) -> Iterable[T]:
    """训练循环的进度条；非终端或 quiet 模式下不显示"""
    disable = not (_progress_enabled and sys.stderr.isatty())
    return tqdm(iterable, desc=desc, total=total, disable=disable, leave=False)
