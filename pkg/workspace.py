# workspace.py
import json
import logging
from pathlib import Path
from typing import Any, Dict, Union

from config import settings
from errors import StageError

logger = logging.getLogger(__name__)

STAGES = ("design", "rendered", "scores", "fits", "reports")


class Workspace:
    """
    流水线的工作区目录：design/ rendered/ scores/ fits/ reports/。
    每个阶段写一个 manifest.json，后续阶段只读取上游的产物。
    """

    def __init__(self, root: Union[str, Path, None] = None):
        self.root = Path(root or settings.WORKSPACE_DIR)

    def stage(self, name: str) -> Path:
        if name not in STAGES:
            raise ValueError(f"Unknown workspace stage '{name}'")
        path = self.root / name
        path.mkdir(parents=True, exist_ok=True)
        return path

    def path(self, stage: str, filename: str) -> Path:
        return self.stage(stage) / filename

    def require(self, stage: str, filename: str) -> Path:
        """上游产物不存在时抛出 StageError，消息中给出缺失的文件。"""
        path = self.root / stage / filename
        if not path.exists():
            raise StageError(f"Missing upstream artifact {path}; run the '{stage}' stage first", str(path))
        return path

    def write_manifest(self, stage: str, content: Dict[str, Any], name: str = "manifest.json") -> Path:
        path = self.path(stage, name)
        path.write_text(json.dumps(content, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")
        return path

    def read_manifest(self, stage: str, name: str = "manifest.json") -> Dict[str, Any]:
        return json.loads(self.require(stage, name).read_text(encoding="utf-8"))

    def has(self, stage: str, filename: str) -> bool:
        return (self.root / stage / filename).exists()
