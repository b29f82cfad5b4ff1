"""Repository intake: URL parsing, pinned checkouts, and layout validation.

A repository is launchable when it carries its own environment definition
(a root ``Dockerfile``); everything else the layout checklist reports is
advisory (README, notebooks, workflow file, CI config).
"""

from __future__ import annotations

import os
import re
import shutil
import subprocess
import tempfile
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Protocol
from urllib.parse import urlsplit

__all__ = [
    "RepoRef",
    "RepoManifest",
    "Checkout",
    "IntakeError",
    "MalformedUrl",
    "UnsupportedScheme",
    "RepoNotFound",
    "RefNotFound",
    "FetchTimeout",
    "AuthRequired",
    "Fetcher",
    "GitCliFetcher",
    "LocalCopyFetcher",
    "parse_repo_url",
    "fetch_repository",
    "inspect_manifest",
    "compute_image_tag",
]

COMMIT_RE = re.compile(r"^[0-9a-f]{40}$")

DEFAULT_FETCH_TIMEOUT = 120.0

# Single path component of an image repository name.
_TAG_COMPONENT_RE = re.compile(r"^[a-z0-9][a-z0-9_.-]*$")
_TAG_SAFE_CHAR_RE = re.compile(r"[^a-z0-9_.-]")


class IntakeError(Exception):
    """Base class for repository intake failures."""


class MalformedUrl(IntakeError):
    pass


class UnsupportedScheme(IntakeError):
    pass


class RepoNotFound(IntakeError):
    pass


class RefNotFound(IntakeError):
    pass


class FetchTimeout(IntakeError):
    pass


class AuthRequired(IntakeError):
    """The remote wants credentials; private repositories are not supported."""


@dataclass(frozen=True)
class RepoRef:
    """A normalized git repository reference, optionally pinned to a commit."""

    host: str
    owner: str
    name: str
    requested_ref: str = "HEAD"
    resolved_commit: str = ""

    def __post_init__(self) -> None:
        for label, value in (("owner", self.owner), ("name", self.name)):
            if not value or "/" in value or any(c.isspace() for c in value):
                raise MalformedUrl(f"invalid repository {label}: {value!r}")
        if not self.host:
            raise MalformedUrl("repository host is empty")
        if self.resolved_commit and not COMMIT_RE.match(self.resolved_commit):
            raise ValueError(f"resolved_commit is not a 40-hex sha: {self.resolved_commit!r}")

    @property
    def canonical_url(self) -> str:
        return f"https://{self.host}/{self.owner}/{self.name}"

    @property
    def slug(self) -> str:
        return f"{self.owner}/{self.name}"


@dataclass(frozen=True)
class RepoManifest:
    """Checklist of launch-relevant files found in a checkout."""

    has_dockerfile: bool = False
    has_readme: bool = False
    notebook_paths: tuple[str, ...] = ()
    workflow_path: str | None = None
    ci_config_path: str | None = None

    @property
    def launchable(self) -> bool:
        # The Dockerfile is the only hard requirement; the rest is advisory.
        return self.has_dockerfile


@dataclass(frozen=True)
class Checkout:
    """A materialized repository tree pinned to a resolved commit."""

    repo: RepoRef
    root_path: Path
    fetched_at: float = field(default_factory=time.time)

    def __post_init__(self) -> None:
        if not self.repo.resolved_commit:
            raise ValueError("checkout requires a resolved commit")


def parse_repo_url(raw: str) -> RepoRef:
    """Parse and normalize a repository URL into a :class:`RepoRef`.

    Accepts ``https://host/owner/name`` with optional trailing ``.git`` or
    ``/``, plus an optional ``@ref`` or ``/tree/ref`` suffix selecting the
    requested ref.
    """
    raw = (raw or "").strip()
    if not raw:
        raise MalformedUrl("empty repository URL")

    parts = urlsplit(raw)
    if parts.scheme != "https":
        if parts.scheme and raw.lower().startswith(f"{parts.scheme}://"):
            raise UnsupportedScheme(f"only https URLs are supported, got {parts.scheme!r}")
        raise MalformedUrl(f"not an https repository URL: {raw!r}")
    if not parts.netloc or "@" in parts.netloc:
        raise MalformedUrl(f"cannot extract host from {raw!r}")

    host = parts.netloc.lower()
    segments = [s for s in parts.path.split("/") if s]
    if len(segments) < 2:
        raise MalformedUrl(f"expected /owner/name in {raw!r}")

    owner = segments[0]
    name = segments[1]
    requested_ref = "HEAD"

    if len(segments) > 2:
        if segments[2] != "tree" or len(segments) < 4:
            raise MalformedUrl(f"unrecognized path suffix in {raw!r}")
        requested_ref = "/".join(segments[3:])

    if "@" in name:
        if requested_ref != "HEAD":
            raise MalformedUrl(f"both @ref and /tree/ref present in {raw!r}")
        name, _, requested_ref = name.partition("@")
        if not requested_ref:
            raise MalformedUrl(f"empty ref after @ in {raw!r}")
    if name.endswith(".git"):
        name = name[: -len(".git")]

    try:
        return RepoRef(host=host, owner=owner, name=name, requested_ref=requested_ref)
    except MalformedUrl:
        raise
    except ValueError as exc:
        raise MalformedUrl(str(exc)) from exc


class Fetcher(Protocol):
    """Materializes a checkout and reports the commit it landed on.

    Implementations write the tree into ``dest`` (an existing empty
    directory) and return the resolved 40-hex commit hash.
    """

    def fetch(self, canonical_url: str, requested_ref: str, dest: Path, timeout: float) -> str: ...


class GitCliFetcher:
    """Production fetcher shelling out to the git client, shallow by default."""

    def fetch(self, canonical_url: str, requested_ref: str, dest: Path, timeout: float) -> str:
        deadline = time.monotonic() + timeout
        self._git(["init", "--quiet", str(dest)], dest, deadline)
        self._git(["remote", "add", "origin", canonical_url], dest, deadline)
        refspec = "HEAD" if requested_ref == "HEAD" else requested_ref
        try:
            self._git(["fetch", "--quiet", "--depth", "1", "origin", refspec], dest, deadline)
        except RefNotFound:
            if not COMMIT_RE.match(requested_ref):
                raise
            # Some servers refuse direct sha fetches; fall back to full history.
            self._git(["fetch", "--quiet", "origin"], dest, deadline)
            self._git(["checkout", "--quiet", "--detach", requested_ref], dest, deadline)
            return self._rev_parse(dest, deadline)
        self._git(["checkout", "--quiet", "--detach", "FETCH_HEAD"], dest, deadline)
        return self._rev_parse(dest, deadline)

    def _rev_parse(self, dest: Path, deadline: float) -> str:
        out = self._git(["rev-parse", "HEAD"], dest, deadline)
        commit = out.strip().lower()
        if not COMMIT_RE.match(commit):
            raise RepoNotFound(f"could not resolve HEAD in {dest}")
        return commit

    def _git(self, args: list[str], cwd: Path, deadline: float) -> str:
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            raise FetchTimeout("repository fetch timed out")
        env = dict(os.environ, GIT_TERMINAL_PROMPT="0", GIT_ASKPASS="true")
        try:
            proc = subprocess.run(
                ["git", *args],
                cwd=str(cwd),
                env=env,
                capture_output=True,
                text=True,
                timeout=remaining,
            )
        except subprocess.TimeoutExpired as exc:
            raise FetchTimeout("repository fetch timed out") from exc
        if proc.returncode == 0:
            return proc.stdout
        raise self._classify(args[0], proc.stderr)

    @staticmethod
    def _classify(op: str, stderr: str) -> IntakeError:
        low = stderr.lower()
        if "authentication failed" in low or "could not read username" in low or "terminal prompts disabled" in low:
            return AuthRequired("remote requires credentials (private repositories are not supported)")
        if "couldn't find remote ref" in low or "not our ref" in low or "pathspec" in low or "unknown revision" in low:
            return RefNotFound(stderr.strip())
        if op in ("fetch", "clone") or "repository" in low or "could not resolve host" in low:
            return RepoNotFound(stderr.strip())
        return IntakeError(stderr.strip())


class LocalCopyFetcher:
    """Fetcher that copies a local directory; used by tests and offline demos.

    ``commit`` is reported as the resolved hash regardless of the requested
    ref, except that refs listed in ``known_refs`` map to their own hashes
    and anything else raises :class:`RefNotFound`.
    """

    def __init__(self, source: Path, commit: str, known_refs: dict[str, str] | None = None):
        self.source = Path(source)
        self.commit = commit
        self.known_refs = dict(known_refs or {})

    def fetch(self, canonical_url: str, requested_ref: str, dest: Path, timeout: float) -> str:
        if not self.source.is_dir():
            raise RepoNotFound(f"fixture directory missing: {self.source}")
        if requested_ref in ("HEAD", self.commit):
            resolved = self.commit
        elif requested_ref in self.known_refs:
            resolved = self.known_refs[requested_ref]
        else:
            raise RefNotFound(f"unknown ref {requested_ref!r}")
        shutil.copytree(self.source, dest, dirs_exist_ok=True)
        return resolved


def fetch_repository(
    ref: RepoRef,
    workdir: Path,
    fetcher: Fetcher | None = None,
    timeout: float = DEFAULT_FETCH_TIMEOUT,
) -> Checkout:
    """Materialize ``ref`` under a fresh subdirectory of ``workdir``.

    The requested ref is resolved to a concrete commit hash; each call uses
    its own destination directory so concurrent fetches never share state.
    """
    fetcher = fetcher or GitCliFetcher()
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    dest = Path(tempfile.mkdtemp(prefix=f"{ref.name}-", dir=workdir))
    try:
        resolved = fetcher.fetch(ref.canonical_url, ref.requested_ref, dest, timeout)
    except IntakeError:
        shutil.rmtree(dest, ignore_errors=True)
        raise
    resolved = resolved.strip().lower()
    if not COMMIT_RE.match(resolved):
        shutil.rmtree(dest, ignore_errors=True)
        raise RepoNotFound(f"fetcher returned a malformed commit hash: {resolved!r}")
    if ref.requested_ref != "HEAD" and COMMIT_RE.match(ref.requested_ref) and resolved != ref.requested_ref:
        shutil.rmtree(dest, ignore_errors=True)
        raise RefNotFound(f"requested commit {ref.requested_ref} but checkout landed on {resolved}")
    return Checkout(repo=replace(ref, resolved_commit=resolved), root_path=dest)


_EXCLUDED_DIRS = {".git", ".ipynb_checkpoints"}


def inspect_manifest(checkout: Checkout) -> RepoManifest:
    """Inspect a checkout against the launchable-repository layout.

    Detection rules: ``Dockerfile`` exact name at the root; README matched
    case-insensitively at the root; notebooks anywhere outside ``.git`` and
    ``.ipynb_checkpoints``; workflow file preferring ``Makefile`` over a
    ``snakefile`` over the first root shell script; CI config preferring
    ``circle.yml`` over ``.travis.yml``.
    """
    root = checkout.root_path
    root_files = sorted(p.name for p in root.iterdir() if p.is_file())

    has_dockerfile = "Dockerfile" in root_files
    has_readme = any(n.lower() == "readme" or n.lower().startswith("readme.") for n in root_files)

    notebooks: list[str] = []
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames[:] = [d for d in dirnames if d not in _EXCLUDED_DIRS]
        for fname in filenames:
            if fname.endswith(".ipynb"):
                rel = Path(dirpath, fname).relative_to(root)
                notebooks.append(rel.as_posix())
    notebooks.sort()

    workflow: str | None = None
    if "Makefile" in root_files:
        workflow = "Makefile"
    else:
        snakefiles = [n for n in root_files if n.lower() == "snakefile"]
        if snakefiles:
            workflow = snakefiles[0]
        else:
            scripts = [n for n in root_files if n.endswith(".sh")]
            if scripts:
                workflow = scripts[0]

    ci_config: str | None = None
    if "circle.yml" in root_files:
        ci_config = "circle.yml"
    elif ".travis.yml" in root_files:
        ci_config = ".travis.yml"

    return RepoManifest(
        has_dockerfile=has_dockerfile,
        has_readme=has_readme,
        notebook_paths=tuple(notebooks),
        workflow_path=workflow,
        ci_config_path=ci_config,
    )


def _tag_component(value: str) -> str:
    part = _TAG_SAFE_CHAR_RE.sub("-", value.lower())
    if not part or not part[0].isalnum():
        part = "x" + part
    return part[:30]


def compute_image_tag(user_login: str, repo: RepoRef) -> str:
    """Deterministic image tag for one (user, repository, commit) build."""
    if not user_login:
        raise ValueError("user_login must be non-empty")
    if not repo.resolved_commit:
        raise ValueError("repository commit not resolved yet")
    user = _tag_component(user_login)
    name = _tag_component(repo.name)
    tag = f"everhub/{user}-{name}:{repo.resolved_commit[:12]}"
    assert all(_TAG_COMPONENT_RE.match(c) for c in tag.split(":")[0].split("/"))
    return tag
