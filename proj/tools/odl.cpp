#include <iostream>

#include "odl/harness.hpp"

int main(int argc, char** argv) { return odl::cmd_dispatch(argc, argv, std::cout, std::cerr); }
