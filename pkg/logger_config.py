# logger_config.py
import logging
import sys
import os
from datetime import datetime
from typing import Optional

def setup_logger(log_dir: Optional[str] = None, level: int = logging.INFO):
    """配置全局日志记录器"""

    # --- 1. 创建 logs 目录 ---
    if log_dir is None:
        from config import settings
        log_dir = settings.LOG_DIR
    os.makedirs(log_dir, exist_ok=True)

    # --- 2. 定义日志格式 ---
    log_formatter = logging.Formatter(
        '%(asctime)s - %(levelname)s - [%(module)s] - %(message)s'
    )

    # --- 3. 获取根日志记录器 ---
    logger = logging.getLogger()
    # 清除已存在的处理器，防止重复记录
    if logger.hasHandlers():
        logger.handlers.clear()

    logger.setLevel(level)

    # --- 4. 配置控制台处理器 ---
    stream_handler = logging.StreamHandler(sys.stdout)
    stream_handler.setFormatter(log_formatter)
    stream_handler.setLevel(level)
    logger.addHandler(stream_handler)

    # --- 5. 配置文件处理器 ---
    log_filename = os.path.join(log_dir, f"audit_{datetime.now().strftime('%Y%m%d')}.log")
    file_handler = logging.FileHandler(log_filename, encoding='utf-8')
    file_handler.setFormatter(log_formatter)
    file_handler.setLevel(level)
    logger.addHandler(file_handler)

    # httpx 每个请求都会打 INFO 日志，评分活动中会淹没进度信息
    logging.getLogger("httpx").setLevel(logging.WARNING)

    logging.info("日志系统已启动，日志将记录到控制台及文件: %s", log_filename)
