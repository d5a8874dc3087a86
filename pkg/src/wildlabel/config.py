"""Workspace configuration with layered precedence.

Settings resolve as: ``WILDLABEL_*`` environment variables override CLI
flags, which override ``wildlabel.conf`` values, which override built-in
defaults. The config file lives in the workspace root and holds
``key = value`` lines with ``#`` comments.

Recognized keys: preset, seed, rate, parallel, timeout, retries, port,
user_agent, fixtures_dir, limit, languages.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

CONF_NAME = "wildlabel.conf"
WORKSPACE_ENV = "WILDLABEL_WORKSPACE"
DEFAULT_WORKSPACE = "workspace"

# settings whose env variable is not simply WILDLABEL_<NAME>
_ENV_ALIASES = {"user_agent": "WILDLABEL_UA", "fixtures_dir": "WILDLABEL_FIXTURES"}


def env_name(setting: str) -> str:
    return _ENV_ALIASES.get(setting, "WILDLABEL_" + setting.upper())


def resolve_workspace(flag_value: str | None) -> Path:
    value = os.environ.get(WORKSPACE_ENV) or flag_value or DEFAULT_WORKSPACE
    return Path(value)


def load_conf_file(workspace: Path) -> dict[str, str]:
    path = workspace / CONF_NAME
    values: dict[str, str] = {}
    if not path.exists():
        return values
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


@dataclass
class WorkspaceConfig:
    """Resolved settings for one CLI invocation."""

    workspace: Path
    file_values: dict[str, str]

    @classmethod
    def resolve(cls, workspace_flag: str | None) -> "WorkspaceConfig":
        workspace = resolve_workspace(workspace_flag)
        return cls(workspace=workspace, file_values=load_conf_file(workspace))

    def setting(self, name: str, flag_value=None, default=None, cast=str):
        """env > CLI flag > config file > default."""
        raw = os.environ.get(env_name(name))
        if raw is None and flag_value is not None:
            return flag_value
        if raw is None:
            raw = self.file_values.get(name)
        if raw is None:
            return default
        try:
            return cast(raw)
        except (TypeError, ValueError) as exc:
            raise ValueError(f"bad value for setting {name!r}: {raw!r}") from exc
