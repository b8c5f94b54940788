import sys

from meg.cli import main

sys.exit(main())
