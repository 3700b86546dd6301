"""Console chatter. Everything goes to stderr so stdout stays machine-readable."""
import sys


def echo(message: str = "") -> None:
    print(message, file=sys.stderr, flush=True)
