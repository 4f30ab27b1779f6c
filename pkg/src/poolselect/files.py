import hashlib
import json
import logging
import os
import typing

from poolselect.error import ConfigError

logger = logging.getLogger(__name__)

StrPath = str | os.PathLike[str]


def read_json(path: StrPath) -> typing.Any:
    """Read and parse the JSON document at ``path``.

    Args:
        path: path of the document

    Returns:
        Parsed document

    Raises:
        poolselect.error.ConfigError: if the file cannot be read or is not valid JSON. The message names the parse
            location.
    """
    logger.debug("Reading JSON document %s", path)
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as ex:
        raise ConfigError(
            f"Malformed JSON in '{path}': {ex.msg} (line {ex.lineno}, column {ex.colno})"
        ) from ex
    except OSError as ex:
        raise ConfigError(f"Cannot read '{path}': {ex.strerror}") from ex


def dump_json(
    document: typing.Any, output: typing.IO[str], pretty: bool = False
) -> None:
    """Serialise ``document`` to ``output``. Keys are sorted so that identical documents always produce identical
    bytes."""
    indent = 2 if pretty else None
    separators = (",", ": ") if pretty else (",", ":")
    json.dump(
        document,
        output,
        indent=indent,
        separators=separators,
        sort_keys=True,
        allow_nan=False,
    )


def write_json(path: StrPath, document: typing.Any, pretty: bool = True) -> None:
    logger.debug("Writing JSON document %s", path)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        dump_json(document, f, pretty=pretty)
        f.write("\n")


def sha256_file(path: StrPath) -> str:
    """Return the hex-encoded SHA-256 digest of the file at ``path``."""
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def expect_mapping(document: typing.Any, what: str) -> dict[str, typing.Any]:
    if not isinstance(document, dict):
        raise ConfigError(f"{what} must be a JSON object")
    return document


def reject_unknown_keys(
    document: dict[str, typing.Any], known: typing.Iterable[str], what: str
) -> None:
    unknown = sorted(set(document) - set(known))
    if unknown:
        raise ConfigError(f"Unknown keys in {what}: {', '.join(unknown)}")
