"""Loop-back wire-protocol server over a toy backend, for transport tests.

Usage: python stub_server.py <comma-separated-vocab> [seed]
"""

import sys

from petkit.backends import ToyConfig, ToyMlmBackend, Vocabulary
from petkit.wire import serve_stdio


def main() -> None:
    tokens = sys.argv[1].split(",")
    seed = int(sys.argv[2]) if len(sys.argv) > 2 else 0
    backend = ToyMlmBackend(Vocabulary(tuple(tokens)), ToyConfig(dim=4, window=3, seed=seed))
    serve_stdio(backend)


if __name__ == "__main__":
    main()
