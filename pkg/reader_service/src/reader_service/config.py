from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class ServiceConfig:
    """Runtime configuration.

    Stub mode needs a seed (it defines the deterministic encodings); model
    mode needs a pretrained extractive-QA model identifier.
    """

    port: int = 8237
    mode: str = "stub"  # "stub" | "model"
    seed: int | None = 0
    model_id: str | None = None
    d: int = 16
    max_batch: int = 256
    host: str = "127.0.0.1"

    def validate(self) -> None:
        if self.mode not in ("stub", "model"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "stub" and self.seed is None:
            raise ValueError("stub mode requires a seed")
        if self.mode == "model" and not self.model_id:
            raise ValueError("model mode requires a model identifier")
        if self.max_batch < 1:
            raise ValueError("max_batch must be >= 1")
        if not (0 <= self.port < 65536):  # 0 binds an ephemeral port
            raise ValueError(f"port {self.port} out of range")
