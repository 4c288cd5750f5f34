#include <iostream>

#include "xrag/cli.hpp"

int main(int argc, char** argv) { return xrag::run_cli(argc, argv, std::cout, std::cerr); }
