"""`python -m pbeunet` entry point."""
import sys

from pbeunet.main import main

sys.exit(main())
