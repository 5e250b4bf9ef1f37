#include <iostream>

#include "mdml_tools/commands.hpp"

int main(int argc, char** argv) { return mdml::cli::run(argc, argv, std::cout, std::cerr); }
