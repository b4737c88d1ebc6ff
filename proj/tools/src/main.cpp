#include <iostream>

#include "fedcrfd_cli/commands.hpp"

int main(int argc, char** argv) { return fedcrfd::cli::run_cli(argc, argv, std::cout, std::cerr); }
