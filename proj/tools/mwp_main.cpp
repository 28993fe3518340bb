#include "mwp/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return mwp::cli::run(argc, argv, std::cin, std::cout, std::cerr); }
