from tcul.cli import main

raise SystemExit(main())
