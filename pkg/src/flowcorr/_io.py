import os
import tempfile
from contextlib import contextmanager


@contextmanager
def atomic_write(path, mode="w"):
    """Write to a temp file next to ``path`` and rename on success.

    Readers never observe a partially written file; on error the temp
    file is removed and ``path`` is left untouched.
    """
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        fh = os.fdopen(fd, mode) if "b" in mode else os.fdopen(fd, mode, newline="")
        with fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def fmt_float(x):
    # repr round-trips float64 exactly
    return repr(float(x))
