#include <iostream>

#include "mecq/cli.hpp"

int main(int argc, char** argv) { return mecq::cli::run(argc, argv, std::cout, std::cerr); }
