# evaluators/http_chat_evaluator.py
import logging
from typing import Any, Dict, Optional

import httpx
from tenacity import Retrying, before_sleep_log, retry_if_exception, stop_after_attempt, wait_exponential

from config import BackendConfig
from errors import BackendError, ConfigError

from .base_evaluator import BaseEvaluator, EvaluationRequest

logger = logging.getLogger(__name__)


def _is_retryable(exc: BaseException) -> bool:
    """只重试传输错误、429 和 5xx；其余 4xx 立即失败。"""
    if isinstance(exc, httpx.TransportError):
        return True
    if isinstance(exc, httpx.HTTPStatusError):
        status = exc.response.status_code
        return status == 429 or status >= 500
    return False


def extract_text(body: Dict[str, Any]) -> str:
    """兼容几种常见的 chat-completion 回复结构。"""
    try:
        if "choices" in body:
            return body["choices"][0]["message"]["content"]
        if "candidates" in body:
            parts = body["candidates"][0]["content"]["parts"]
            return "".join(part.get("text", "") for part in parts)
        if "output_text" in body:
            return body["output_text"]
        if "text" in body:
            return body["text"]
    except (KeyError, IndexError, TypeError) as e:
        raise BackendError(f"Malformed chat-completion response: {e!r}") from e
    raise BackendError(f"Unrecognised chat-completion response keys: {sorted(body)}")


class HttpChatEvaluator(BaseEvaluator):
    """通用 chat-completion HTTP 后端。"""

    def __init__(self, config: BackendConfig, transport: Optional[httpx.BaseTransport] = None):
        self.config = config
        self._transport = transport
        self._client: Optional[httpx.Client] = None
        self._retrying = Retrying(
            stop=stop_after_attempt(config.max_attempts),
            wait=wait_exponential(multiplier=config.backoff_initial, max=config.backoff_max),
            retry=retry_if_exception(_is_retryable),
            before_sleep=before_sleep_log(logger, logging.WARNING),
            reraise=True,
        )

    @property
    def name(self) -> str:
        return "http_chat"

    @property
    def model_name(self) -> str:
        return self.config.model_name

    def login(self):
        if not self.config.endpoint_url:
            raise ConfigError("http_chat backend needs an endpoint URL (LLM_ENDPOINT_URL)")
        headers = {"Content-Type": "application/json"}
        api_key = self.config.api_key()
        if api_key:
            value = f"Bearer {api_key}" if self.config.auth_header.lower() == "authorization" else api_key
            headers[self.config.auth_header] = value
        else:
            logger.warning("环境变量 %s 未设置，请求将不带认证头发送。", self.config.api_key_env)
        self._client = httpx.Client(headers=headers, timeout=self.config.timeout, transport=self._transport)
        logger.info("已连接评估后端 %s (model=%s)", self.config.endpoint_url, self.config.model_name)

    def logout(self):
        if self._client is not None:
            self._client.close()
            self._client = None

    def payload(self, prompt_text: str) -> Dict[str, Any]:
        return {
            "model": self.config.model_name,
            "messages": [{"role": "user", "content": prompt_text}],
            "temperature": self.config.temperature,
            "top_p": self.config.top_p,
            "top_k": self.config.top_k,
            "max_output_tokens": self.config.max_tokens,
        }

    def _post(self, body: Dict[str, Any]) -> Dict[str, Any]:
        response = self._client.post(self.config.endpoint_url, json=body)
        response.raise_for_status()
        return response.json()

    def complete(self, request: EvaluationRequest) -> str:
        if self._client is None:
            raise BackendError("http_chat backend used before login()")
        try:
            # copy() 让每个工作线程持有独立的重试状态
            body = self._retrying.copy()(self._post, self.payload(request.prompt.text))
        except httpx.HTTPStatusError as e:
            raise BackendError(f"HTTP {e.response.status_code} from {self.config.endpoint_url}") from e
        except httpx.HTTPError as e:
            raise BackendError(f"Transport failure after {self.config.max_attempts} attempts: {e!r}") from e
        except ValueError as e:
            raise BackendError(f"Response is not valid JSON: {e}") from e
        text = extract_text(body)
        if not isinstance(text, str):
            raise BackendError(f"Response content is {type(text).__name__}, expected text")
        return text
