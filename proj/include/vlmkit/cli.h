#pragma once

#include <iostream>
#include <string>
#include <vector>

namespace vlmkit {

// Exit codes: 0 success, 1 domain error, 2 usage error.
int dispatch(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr);
int dispatch(int argc, char** argv);

}  // namespace vlmkit
