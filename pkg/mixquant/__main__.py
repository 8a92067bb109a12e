from mixquant.main import main

main()
