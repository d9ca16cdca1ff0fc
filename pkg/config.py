# config.py
import os
from typing import Literal, Optional

from pydantic import BaseModel, Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

class Settings(BaseSettings):
    # 使用新的 model_config 声明环境配置
    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    WORKSPACE_DIR: str = "workspace"
    DATABASE_URL: Optional[str] = None        # 为空时使用工作区内的 SQLite 文件 scores/store.db
    DESIGN_CONFIG: str = "paper-fullstack"   # 配置名（configs/ 下）或 JSON 文件路径
    LOG_DIR: str = "logs"

    # --- 评估后端 ---
    LLM_ENDPOINT_URL: str = ""
    LLM_MODEL_NAME: str = "gemini-2.0-flash"
    LLM_API_KEY_ENV: str = "LLM_API_KEY"     # 只保存环境变量名，不保存密钥本身
    LLM_AUTH_HEADER: str = "Authorization"
    CONCURRENCY_LIMIT: int = 4
    MAX_ATTEMPTS: int = 5
    REQUEST_TIMEOUT: float = 60.0

settings = Settings()


class BackendConfig(BaseModel):
    """评估后端配置。解码参数默认值：温度 0、top_p 0.95、top_k 40、最多 256 个输出 token。"""
    kind: Literal["http_chat", "synthetic"] = "http_chat"
    endpoint_url: str = ""
    model_name: str = "gemini-2.0-flash"
    temperature: float = 0.0
    top_p: float = 0.95
    top_k: int = 40
    max_tokens: int = 256
    api_key_env: str = "LLM_API_KEY"
    auth_header: str = "Authorization"
    concurrency_limit: int = Field(default=4, ge=1)
    max_attempts: int = Field(default=5, ge=1)
    backoff_initial: float = Field(default=1.0, ge=0.0)
    backoff_max: float = Field(default=30.0, ge=0.0)
    timeout: float = 60.0

    @field_validator("endpoint_url")
    @classmethod
    def _strip_url(cls, value: str) -> str:
        return value.rstrip("/")

    @classmethod
    def from_settings(cls, kind: str = "http_chat", **overrides) -> "BackendConfig":
        values = dict(
            kind=kind,
            endpoint_url=settings.LLM_ENDPOINT_URL,
            model_name=settings.LLM_MODEL_NAME,
            api_key_env=settings.LLM_API_KEY_ENV,
            auth_header=settings.LLM_AUTH_HEADER,
            concurrency_limit=settings.CONCURRENCY_LIMIT,
            max_attempts=settings.MAX_ATTEMPTS,
            timeout=settings.REQUEST_TIMEOUT,
        )
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def api_key(self) -> Optional[str]:
        return os.environ.get(self.api_key_env)
