#include <iostream>

#include "marconflow/cli.hpp"

int main(int argc, char** argv) { return marconflow::cli::run(argc, argv, std::cout, std::cerr); }
