# Tests package for the DF-Conformer enhancement repository
