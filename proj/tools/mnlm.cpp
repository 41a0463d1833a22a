// SPDX-License-Identifier: Apache-2.0

#include "mnlm/cli.hpp"

int main(int argc, char** argv) { return mnlm::cli::run(argc, argv); }
