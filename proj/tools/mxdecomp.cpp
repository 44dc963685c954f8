// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include "mxdecomp/cli.hpp"

int main(int argc, char** argv) { return mxdecomp::run_cli(argc, argv, std::cout, std::cerr); }
