#include <iostream>

#include "pop/cli.hpp"

int main(int argc, char** argv) { return pop::cli_dispatch(argc, argv, std::cout, std::cerr); }
