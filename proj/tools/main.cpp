#include "poer/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return poer::run_cli(argc, argv, std::cout, std::cerr); }
