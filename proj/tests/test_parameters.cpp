#include <cmath>
#include <limits>
#include <sstream>

#include <gtest/gtest.h>

#include "cpmr/parameters.hpp"

using namespace cpmr;

namespace {

Checkpoint sample() {
  Checkpoint ck;
  ck.params.add("E", Tensor(2, 3, {0.1, -0.0, 1e-310, 3.14159, -2.5e100, 7}));
  ck.params.add("alpha", Tensor(1, 1, {std::nextafter(1.0, 2.0)}));
  ck.meta["model.d"] = "3";
  ck.meta["dataset.path"] = "/tmp/with space/x.bin";
  return ck;
}

std::string bytes(const Checkpoint& ck) {
  std::ostringstream os;
  write_checkpoint(os, ck);
  return os.str();
}

}  // namespace

TEST(ParameterSet, AddLookupAndCounts) {
  ParameterSet p;
  p.add("a", Tensor(2, 2));
  p.add("b", Tensor(1, 3));
  EXPECT_TRUE(p.contains("a"));
  EXPECT_FALSE(p.contains("c"));
  EXPECT_EQ(p.size(), 2u);
  EXPECT_EQ(p.scalar_count(), 7u);
  EXPECT_THROW(p.at("c"), ConfigError);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const Checkpoint ck = sample();
  std::istringstream is(bytes(ck));
  const Checkpoint back = read_checkpoint(is);
  EXPECT_EQ(back.meta, ck.meta);
  for (const auto& [name, t] : ck.params) {
    const Tensor& u = back.params.at(name);
    ASSERT_TRUE(u.same_shape(t));
    for (std::size_t k = 0; k < t.size(); ++k)
      EXPECT_EQ(std::bit_cast<std::uint64_t>(u[k]), std::bit_cast<std::uint64_t>(t[k])) << name << k;
  }
  EXPECT_EQ(bytes(back), bytes(ck));
}

TEST(Checkpoint, RejectsTamperedOrTruncatedFiles) {
  const std::string good = bytes(sample());
  auto load = [](const std::string& s) {
    std::istringstream is(s);
    return read_checkpoint(is);
  };
  std::string bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_THROW(load(bad_magic), CheckpointError);
  EXPECT_THROW(load(good.substr(0, good.size() - 3)), CheckpointError);
  EXPECT_THROW(load(good + "x"), CheckpointError);
  std::string bad_version = good;
  bad_version.replace(bad_version.find("version 1"), 9, "version 9");
  EXPECT_THROW(load(bad_version), CheckpointError);
}

TEST(Checkpoint, MetaKeysMustNotContainWhitespace) {
  Checkpoint ck;
  ck.meta["bad key"] = "v";
  std::ostringstream os;
  EXPECT_THROW(write_checkpoint(os, ck), CheckpointError);
}
