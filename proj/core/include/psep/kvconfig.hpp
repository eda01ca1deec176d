#pragma once

#include <map>
#include <string>

namespace psep {

// `key = value` config files: one pair per line, '#' starts a comment,
// blank lines ignored. Values keep internal whitespace.
std::map<std::string, std::string> parse_kvconfig(const std::string& text);
std::map<std::string, std::string> read_kvconfig(const std::string& path);

}  // namespace psep
