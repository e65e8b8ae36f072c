import sys

from cryptocatch.cli import main

sys.exit(main())
