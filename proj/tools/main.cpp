// SPDX-License-Identifier: Apache-2.0
#include <iostream>

#include "namelearn/cli.hpp"

int main(int argc, char** argv) { return namelearn::run_cli(argc, argv, std::cout, std::cerr); }
