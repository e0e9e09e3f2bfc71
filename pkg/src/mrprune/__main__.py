from mrprune.cli import main
import sys

sys.exit(main())
