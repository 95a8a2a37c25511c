#include <iostream>

#include "verbose/cli.hpp"

int main(int argc, char** argv) { return verbose::run_cli(argc, argv, std::cout, std::cerr); }
