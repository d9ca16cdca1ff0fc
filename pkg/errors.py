# errors.py
from typing import Optional, Sequence


class AuditError(Exception):
    """所有审计流程错误的基类，CLI 捕获后以非零状态退出。"""


class ConfigError(AuditError, ValueError):
    pass


class FeatureError(AuditError, ValueError):
    pass


class TemplateError(AuditError, KeyError):
    def __str__(self) -> str:
        # KeyError 默认会给消息加引号
        return str(self.args[0]) if self.args else ""


class ArityError(AuditError, ValueError):
    pass


class ParseError(AuditError, ValueError):
    def __init__(self, reason: str, raw_text: str = ""):
        super().__init__(reason)
        self.reason = reason
        self.raw_text = raw_text


class BackendError(AuditError):
    pass


class RankError(AuditError):
    def __init__(self, columns: Sequence[str]):
        self.columns = list(columns)
        super().__init__(f"Design matrix is rank deficient; collinear columns: {', '.join(self.columns)}")


class InferenceError(AuditError):
    pass


class DegenerateError(AuditError):
    pass


class StageError(AuditError):
    def __init__(self, message: str, path: Optional[str] = None):
        super().__init__(message)
        self.path = path
