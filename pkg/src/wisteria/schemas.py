"""Pydantic request/response models for the service.

File payloads travel as a mapping of relative path to entry; text entries
carry the content verbatim and binary entries carry base64. Domain-level
validation of configs happens in the core parsers, not here.
"""

from __future__ import annotations

import base64
from typing import Any, Literal

from pydantic import BaseModel, Field


class FileEntry(BaseModel):
    kind: Literal["text", "binary"]
    data: str

    @staticmethod
    def from_content(content: str | bytes) -> "FileEntry":
        if isinstance(content, bytes):
            return FileEntry(kind="binary", data=base64.b64encode(content).decode("ascii"))
        return FileEntry(kind="text", data=content)

    def to_content(self) -> str | bytes:
        if self.kind == "binary":
            return base64.b64decode(self.data)
        return self.data


class BundleResponse(BaseModel):
    files: dict[str, FileEntry]
    meta: dict[str, Any] = Field(default_factory=dict)


class GenerateRequest(BaseModel):
    config: dict[str, Any]


class TrainRequest(BaseModel):
    config: dict[str, Any]
    files: dict[str, FileEntry]


class EvalRequest(BaseModel):
    files: dict[str, FileEntry]


class SweepRequest(BaseModel):
    config: dict[str, Any]
    protocol: str | None = None


class ReportRequest(BaseModel):
    files: dict[str, FileEntry]


class HealthResponse(BaseModel):
    status: str
    version: str


def bundle_response(files: dict[str, str | bytes], meta: dict | None = None) -> BundleResponse:
    return BundleResponse(
        files={path: FileEntry.from_content(c) for path, c in files.items()},
        meta=meta or {},
    )
