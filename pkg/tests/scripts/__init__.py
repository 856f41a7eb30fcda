# Long-running acceptance scripts
