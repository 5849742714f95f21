// SPDX-License-Identifier: Apache-2.0
#include <iostream>

#include "qsla/cli.hpp"

int main(int argc, char** argv) { return qsla::cli::run(argc, argv, std::cout, std::cerr); }
