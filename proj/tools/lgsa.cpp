#include <iostream>

#include "lgsa/cli.hpp"

int main(int argc, char** argv) { return lgsa::cli::dispatch(argc, argv, std::cout, std::cerr); }
