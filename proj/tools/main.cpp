#include <iostream>

#include "hovertrans/cli.hpp"

int main(int argc, char** argv) { return hovertrans::cli_main(argc, argv, std::cout, std::cerr); }
