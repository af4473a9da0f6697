from lsw.cli import main

main()
