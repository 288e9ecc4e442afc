#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace nq {

// Exit codes: 0 success, 1 validation or runtime failure, 2 usage error.
// Errors are one line on err: "error: <kind>: <message>".
int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int cli_main(int argc, char** argv);

}  // namespace nq
