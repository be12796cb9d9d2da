from datetime import datetime

import pytz

from config.config import TIMEZONE


def get_timezone(name: str = None):
    """
    Returns the pytz timezone used to stamp run artifacts.

    Args:
        name (str, optional): IANA timezone name. Defaults to IMPUTAD_TIMEZONE.
    """
    return pytz.timezone(name or TIMEZONE)


# Get the current time in the configured timezone
def get_current_time(name: str = None):
    """
    Returns the current date and time in the configured timezone.
    """
    return datetime.now(get_timezone(name))


def timestamp(name: str = None) -> str:
    """ISO-8601 stamp, seconds precision, with the UTC offset."""
    return get_current_time(name).isoformat(timespec="seconds")


# Convert a UTC datetime to the configured timezone
def to_local_time(utc_dt, name: str = None):
    """
    Converts a UTC datetime object to the configured timezone.

    Args:
        utc_dt (datetime): A UTC datetime object.

    Returns:
        datetime: A datetime object converted to the configured timezone.
    """
    return utc_dt.astimezone(get_timezone(name))


def to_utc(local_dt):
    return local_dt.astimezone(pytz.utc)
