import sys

from crackcnn.cli import main

sys.exit(main())
