from pathlib import Path
import hashlib
import logging
import os
import tempfile


def create_logger(name: str, verbose: bool = False) -> logging.Logger:
    """
    Create a named logger with a single stream handler.

    Parameters
    ----------
    name : str
        The name of the logger.
    verbose : bool, optional
        If True the logger emits INFO messages, otherwise only
        warnings and errors.
        (default: False)

    Returns
    -------
    logging.Logger
        The configured logger.
    """
    logger = logging.getLogger(name)
    formatter = logging.Formatter(
        "%(levelname)s %(asctime)s: %(message)s", datefmt="%H:%M:%S"
    )

    handler = logging.StreamHandler()
    handler.setFormatter(formatter)

    if logger.hasHandlers():
        logger.handlers.clear()

    logger.addHandler(handler)
    logger.propagate = False

    if verbose:
        logger.setLevel(logging.INFO)
    else:
        logger.setLevel(logging.WARNING)

    return logger


def atomic_write_bytes(path: str | Path, payload: bytes) -> Path:
    """
    Write `payload` to `path` through a temporary file and a rename,
    so readers never observe a partially written file.

    Parameters
    ----------
    path : str or Path
        Destination file.
    payload : bytes
        File content.

    Returns
    -------
    Path
        The destination path.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    file_descriptor, temp_name = tempfile.mkstemp(
        dir=path.parent, prefix=f".{path.name}.", suffix=".tmp"
    )
    try:
        with os.fdopen(file_descriptor, "wb") as file:
            file.write(payload)
        os.replace(temp_name, path)
    except BaseException:
        if os.path.exists(temp_name):
            os.remove(temp_name)
        raise

    return path


def atomic_write_text(path: str | Path, text: str) -> Path:
    """
    Write UTF-8 `text` to `path` atomically.

    Parameters
    ----------
    path : str or Path
        Destination file.
    text : str
        File content.

    Returns
    -------
    Path
        The destination path.
    """
    return atomic_write_bytes(path, text.encode("utf-8"))


def file_sha256(path: str | Path) -> str:
    """
    Calculate the SHA-256 hex digest of a file.

    Parameters
    ----------
    path : str or Path
        The file to hash.

    Returns
    -------
    str
        The hex digest.
    """
    digest = hashlib.sha256()
    with open(path, "rb") as file:
        for chunk in iter(lambda: file.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
