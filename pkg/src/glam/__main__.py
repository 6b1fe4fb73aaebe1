import sys

from glam.cli import main

sys.exit(main())
