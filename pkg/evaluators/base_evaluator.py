# evaluators/base_evaluator.py
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Tuple

from design import PairFeatures
from rendering import RenderedDocument


@dataclass(frozen=True)
class EvaluationRequest:
    """一次后端调用：一个评分提示（一个配对）或一个排序提示（三个档案）。"""
    cache_key: str
    task: str                      # score | rank
    prompt: RenderedDocument
    run_index: int
    source_id: str                 # 评分为 pair_id，排序为 group_id
    brief_id: str
    template_hash: str
    features: Tuple[PairFeatures, ...] = ()
    profile_ids: Tuple[str, ...] = ()
    labels: Tuple[str, ...] = field(default=())


class BaseEvaluator(ABC):
    """
    评估后端抽象基类，定义了所有后端必须实现的标准接口。
    """

    @property
    @abstractmethod
    def name(self) -> str:
        pass

    @property
    @abstractmethod
    def model_name(self) -> str:
        """写入缓存键的模型标识；更换模型即令缓存失效。"""
        pass

    @abstractmethod
    def login(self):
        """建立连接（如果需要）"""
        pass

    @abstractmethod
    def logout(self):
        """释放连接（如果需要）"""
        pass

    @abstractmethod
    def complete(self, request: EvaluationRequest) -> str:
        """
        把提示发给后端
        :return: 后端的原始回复文本；传输失败时抛出 BackendError
        """
        pass
