#include <iostream>

#include "klapi/cli.hpp"

int main(int argc, char** argv) { return klapi::cli::run(argc, argv, std::cout, std::cerr); }
