"""Input validation helpers shared by the estimators."""

import numpy as np

SURVIVAL_DTYPE = np.dtype([("event", bool), ("time", np.float64)])


def make_survival_y(time, event):
    """Pack follow-up times and event flags into a structured array.

    The layout (``event``, ``time``) matches the convention used by
    scikit-survival so labels can be passed as the ``y`` of ``fit``.
    """
    time = np.asarray(time, dtype=np.float64).ravel()
    event = np.asarray(event).ravel()
    if time.shape != event.shape:
        raise ValueError(
            f"time and event lengths differ: {time.shape[0]} vs {event.shape[0]}"
        )
    if event.dtype != bool:
        if not np.all(np.isin(event, (0, 1))):
            raise ValueError("event indicators must be 0/1 or boolean")
        event = event.astype(bool)
    y = np.empty(time.shape[0], dtype=SURVIVAL_DTYPE)
    y["event"] = event
    y["time"] = time
    return y


def check_survival_y(y, require_event=True):
    """Return ``(time, event)`` arrays from a structured array or a pair.

    Raises
    ------
    ValueError
        If times are non-positive or non-finite, or when ``require_event``
        is set and no event is observed.
    """
    if isinstance(y, np.ndarray) and y.dtype.names is not None:
        if "time" not in y.dtype.names or "event" not in y.dtype.names:
            raise ValueError("structured y needs 'time' and 'event' fields")
        time = np.asarray(y["time"], dtype=np.float64)
        event = np.asarray(y["event"]).astype(bool)
    else:
        time, event = y
        y = make_survival_y(time, event)
        time, event = y["time"], y["event"]
    if time.ndim != 1 or time.size == 0:
        raise ValueError("no observed events")
    if not np.all(np.isfinite(time)) or np.any(time <= 0):
        raise ValueError("survival times must be positive and finite")
    if require_event and not event.any():
        raise ValueError("no observed events")
    return time, event


def check_finite(x, name="input"):
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError(f"non-finite {name}")
    return x


def check_log_risks(log_risks, n):
    h = np.asarray(log_risks, dtype=np.float64).ravel()
    if h.shape[0] != n:
        raise ValueError(f"expected {n} log-risks, got {h.shape[0]}")
    if not np.all(np.isfinite(h)):
        raise ValueError("non-finite input")
    return h
