#include "milab/data.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cstdio>
#include <set>
#include <sstream>

namespace milab {

namespace {

using ordered_json = nlohmann::ordered_json;

const std::vector<std::string>& name_words() {
    static const std::vector<std::string> v = {
        "James",   "Mary",     "John",    "Patricia", "Robert",  "Jennifer", "Michael",
        "Linda",   "William",  "Barbara", "David",    "Susan",   "Richard", "Jessica",
        "Joseph",  "Sarah",    "Thomas",  "Karen",    "Charles", "Nancy",   "Daniel",
        "Lisa",    "Matthew",  "Betty",   "Anthony",  "Margaret", "Mark",   "Sandra",
        "Donald",  "Ashley",   "Steven",  "Kimberly", "Paul",    "Emily",   "Andrew",
        "Donna",   "Joshua",   "Michelle", "Kenneth", "Carol",   "Kevin",   "Amanda",
        "Brian",   "Dorothy",  "George",  "Melissa",  "Edward",  "Deborah", "Ronald",
        "Stephanie", "Timothy", "Rebecca", "Jason",   "Sharon",  "Jeffrey", "Laura",
        "Ryan",    "Cynthia",  "Jacob",   "Kathleen", "Gary",    "Amy",     "Nicholas",
        "Shirley", "Eric",     "Angela",  "Jonathan", "Helen",   "Stephen", "Anna",
        "Larry",   "Brenda",   "Justin",  "Pamela",   "Scott",   "Nicole",  "Brandon",
        "Emma",    "Benjamin", "Samantha", "Samuel",  "Katherine", "Gregory", "Christine",
        "Frank",   "Debra",    "Alexander", "Rachel", "Raymond", "Catherine", "Patrick",
        "Carolyn", "Jack",     "Janet",   "Dennis",   "Ruth",    "Jerry",   "Maria",
        "Tyler",   "Heather"};
    return v;
}

const std::vector<std::string>& place_words() {
    static const std::vector<std::string> v = {
        "garden", "store",   "school",  "park",   "office", "market", "museum",
        "library", "beach",  "cinema",  "cafe",   "zoo",    "station", "hospital",
        "farm",   "gym",     "hotel",   "airport", "bakery", "harbor"};
    return v;
}

const std::vector<std::string>& object_words() {
    static const std::vector<std::string> v = {
        "flowers", "milk",   "book",   "ball",  "ring",    "basket", "guitar",
        "camera",  "ticket", "bottle", "cake",  "lamp",    "map",    "pencil",
        "wallet",  "umbrella", "kite", "drum",  "scarf",   "ladder"};
    return v;
}

const std::vector<std::string>& noun_words() {
    static const std::vector<std::string> v = {
        "war",      "festival",  "project",   "voyage",     "siege",      "drought",
        "contract", "dynasty",   "expedition", "famine",    "truce",      "strike",
        "blockade", "marriage",  "occupation", "pilgrimage", "plague",    "rebellion",
        "renovation", "tournament"};
    return v;
}

const std::vector<std::string>& function_words() {
    static const std::vector<std::string> v = {
        "<bos>", "When",  "Then",   "After",  "While",  "and",    "went",  "got",
        "arrived", "stayed", "were", "walked", "came",   "worked", "played", "drove",
        "met",   "sat",    "stopped", "moved", "to",     "at",     "the",   ",",
        "gave",  "handed", "passed", "brought", "showed", "sold",  "offered", "threw",
        "took",  "lent",   "tossed", "mailed", "carried", "The",   "lasted", "from",
        "year",  "17"};
    return v;
}

// Slots: $A and $B are the two clause-1 names (subject assignment decided per
// sample), $S the clause-2 subject, $P a place, $O an object.
const std::vector<std::vector<std::string>>& ioi_templates() {
    static const std::vector<std::vector<std::string>> v = {
        {"When", "$A", "and", "$B", "went", "to", "the", "$P", ",", "$S", "gave", "the", "$O", "to"},
        {"When", "$A", "and", "$B", "got", "to", "the", "$P", ",", "$S", "handed", "the", "$O", "to"},
        {"Then", "$A", "and", "$B", "went", "to", "the", "$P", ",", "and", "$S", "gave", "the", "$O", "to"},
        {"After", "$A", "and", "$B", "arrived", "at", "the", "$P", ",", "$S", "passed", "the", "$O", "to"},
        {"While", "$A", "and", "$B", "stayed", "at", "the", "$P", ",", "$S", "brought", "the", "$O", "to"},
        {"When", "$A", "and", "$B", "were", "at", "the", "$P", ",", "$S", "showed", "the", "$O", "to"},
        {"Then", "$A", "and", "$B", "walked", "to", "the", "$P", ",", "and", "$S", "handed", "the", "$O", "to"},
        {"After", "$A", "and", "$B", "came", "to", "the", "$P", ",", "$S", "sold", "the", "$O", "to"},
        {"While", "$A", "and", "$B", "worked", "at", "the", "$P", ",", "$S", "offered", "the", "$O", "to"},
        {"When", "$A", "and", "$B", "played", "at", "the", "$P", ",", "$S", "threw", "the", "$O", "to"},
        {"Then", "$A", "and", "$B", "drove", "to", "the", "$P", ",", "and", "$S", "took", "the", "$O", "to"},
        {"After", "$A", "and", "$B", "met", "at", "the", "$P", ",", "$S", "lent", "the", "$O", "to"},
        {"While", "$A", "and", "$B", "sat", "at", "the", "$P", ",", "$S", "tossed", "the", "$O", "to"},
        {"When", "$A", "and", "$B", "stopped", "at", "the", "$P", ",", "$S", "mailed", "the", "$O", "to"},
        {"Then", "$A", "and", "$B", "moved", "to", "the", "$P", ",", "and", "$S", "carried", "the", "$O", "to"},
    };
    return v;
}

const std::vector<std::string>& gt_template() {
    static const std::vector<std::string> v = {"The", "$N",  "lasted", "from", "the", "year",
                                               "17",  "$XX", "to",     "the",  "year", "17"};
    return v;
}

}  // namespace

std::string task_name(Task t) { return t == Task::ioi ? "ioi" : "greater_than"; }

Task task_from_name(const std::string& s) {
    if (s == "ioi") return Task::ioi;
    if (s == "greater_than" || s == "gt") return Task::greater_than;
    throw validation_error("unknown task: " + s);
}

std::string corruption_name(Corruption c) {
    switch (c) {
        case Corruption::none: return "none";
        case Corruption::name_moving: return "name_moving";
        case Corruption::subject_duplication: return "subject_duplication";
        case Corruption::duplication: return "duplication";
        case Corruption::lower_than: return "lower_than";
    }
    return "?";
}

Corruption corruption_from_name(const std::string& s) {
    if (s == "none") return Corruption::none;
    if (s == "name_moving" || s == "name-moving") return Corruption::name_moving;
    if (s == "subject_duplication" || s == "subject-duplication")
        return Corruption::subject_duplication;
    if (s == "duplication") return Corruption::duplication;
    if (s == "lower_than" || s == "lower-than") return Corruption::lower_than;
    throw validation_error("unknown corruption: " + s);
}

Vocabulary::Vocabulary() {
    auto push_group = [&](const std::vector<std::string>& ws, std::vector<int>* out) {
        for (const auto& w : ws) {
            if (out) out->push_back(static_cast<int>(words_.size()));
            words_.push_back(w);
        }
    };
    push_group(function_words(), nullptr);  // includes <bos> at id 0
    bos_ = 0;
    push_group(name_words(), &names_);
    push_group(place_words(), &places_);
    push_group(object_words(), &objects_);
    push_group(noun_words(), &nouns_);
    for (int yy = 2; yy <= 98; ++yy) {
        if (yy == 17) {
            // same surface form as the century token already in the vocab
            years_.push_back(id("17"));
            continue;
        }
        char buf[4];
        std::snprintf(buf, sizeof(buf), "%02d", yy);
        years_.push_back(static_cast<int>(words_.size()));
        words_.push_back(buf);
    }
    year_value_.assign(words_.size(), -1);
    for (int yy = 2; yy <= 98; ++yy) year_value_[static_cast<size_t>(year_token(yy))] = yy;
    is_name_.assign(words_.size(), 0);
    for (int id : names_) is_name_[static_cast<size_t>(id)] = 1;
}

const Vocabulary& Vocabulary::instance() {
    static Vocabulary v;
    return v;
}

int Vocabulary::id(const std::string& word) const {
    for (size_t i = 0; i < words_.size(); ++i) {
        if (words_[i] == word) return static_cast<int>(i);
    }
    throw validation_error("out-of-vocabulary word: " + word);
}

bool Vocabulary::contains(const std::string& word) const {
    for (const auto& w : words_) {
        if (w == word) return true;
    }
    return false;
}

const std::string& Vocabulary::word(int i) const {
    if (i < 0 || i >= size()) throw validation_error("token id out of range");
    return words_[static_cast<size_t>(i)];
}

std::vector<int> Vocabulary::tokenize(const std::vector<std::string>& ws) const {
    std::vector<int> out;
    out.reserve(ws.size());
    for (const auto& w : ws) out.push_back(id(w));
    return out;
}

std::vector<std::string> Vocabulary::detokenize(const std::vector<int>& ids) const {
    std::vector<std::string> out;
    out.reserve(ids.size());
    for (int i : ids) out.push_back(word(i));
    return out;
}

int Vocabulary::year_token(int yy) const {
    if (yy < 2 || yy > 98) throw validation_error("year out of range");
    return years_[static_cast<size_t>(yy - 2)];
}

int Vocabulary::year_value(int id) const {
    if (id < 0 || id >= size()) return -1;
    return year_value_[static_cast<size_t>(id)];
}

bool Vocabulary::is_name(int id) const {
    return id >= 0 && id < size() && is_name_[static_cast<size_t>(id)];
}

int ioi_template_count() { return static_cast<int>(ioi_templates().size()); }

int ioi_template_length(int template_id) {
    const auto& t = ioi_templates().at(static_cast<size_t>(template_id));
    return static_cast<int>(t.size()) + 1;  // +BOS
}

int greater_than_template_length() { return static_cast<int>(gt_template().size()) + 1; }

namespace {

PromptSample instantiate_ioi(int template_id, bool subject_first, int io_name, int s_name,
                             int place, int object) {
    const Vocabulary& voc = Vocabulary::instance();
    const auto& tmpl = ioi_templates()[static_cast<size_t>(template_id)];
    PromptSample ps;
    ps.task = Task::ioi;
    ps.template_id = template_id;
    ps.tokens.push_back(voc.bos());
    int a_name = subject_first ? s_name : io_name;
    int b_name = subject_first ? io_name : s_name;
    for (const auto& w : tmpl) {
        int pos = static_cast<int>(ps.tokens.size());
        if (w == "$A") {
            ps.tokens.push_back(a_name);
            (subject_first ? ps.positions.s1 : ps.positions.io) = pos;
        } else if (w == "$B") {
            ps.tokens.push_back(b_name);
            (subject_first ? ps.positions.io : ps.positions.s1) = pos;
        } else if (w == "$S") {
            ps.tokens.push_back(s_name);
            ps.positions.s2 = pos;
        } else if (w == "$P") {
            ps.tokens.push_back(place);
        } else if (w == "$O") {
            ps.tokens.push_back(object);
        } else {
            ps.tokens.push_back(voc.id(w));
        }
    }
    ps.positions.end = static_cast<int>(ps.tokens.size()) - 1;
    ps.label = io_name;
    return ps;
}

}  // namespace

Dataset gen_ioi(int n, uint64_t seed) {
    if (n < 1) throw validation_error("gen_ioi: n must be >= 1");
    const Vocabulary& voc = Vocabulary::instance();
    Rng rng(seed);
    Dataset d;
    d.task = Task::ioi;
    d.corruption = Corruption::none;
    d.seed = seed;
    d.samples.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        int tid = static_cast<int>(rng.uniform(static_cast<uint64_t>(ioi_template_count())));
        bool subject_first = rng.uniform(2) == 1;
        int io_idx = static_cast<int>(rng.uniform(voc.names().size()));
        int s_idx = static_cast<int>(rng.uniform(voc.names().size() - 1));
        if (s_idx >= io_idx) ++s_idx;  // without replacement
        int place = voc.places()[rng.uniform(voc.places().size())];
        int object = voc.objects()[rng.uniform(voc.objects().size())];
        d.samples.push_back(instantiate_ioi(tid, subject_first, voc.names()[io_idx],
                                            voc.names()[s_idx], place, object));
    }
    return d;
}

Dataset gen_greater_than(int n, uint64_t seed) {
    if (n < 1) throw validation_error("gen_greater_than: n must be >= 1");
    const Vocabulary& voc = Vocabulary::instance();
    Rng rng(seed);
    Dataset d;
    d.task = Task::greater_than;
    d.corruption = Corruption::none;
    d.seed = seed;
    for (int i = 0; i < n; ++i) {
        int xx = 2 + static_cast<int>(rng.uniform(96));  // 02..97
        int noun = voc.nouns()[rng.uniform(voc.nouns().size())];
        // teacher: a uniformly sampled year greater than XX (the metric never
        // reads it; training needs a completion token)
        int yy = xx + 1 + static_cast<int>(rng.uniform(static_cast<uint64_t>(98 - xx)));
        PromptSample ps;
        ps.task = Task::greater_than;
        ps.template_id = 0;
        ps.xx = xx;
        ps.tokens.push_back(voc.bos());
        for (const auto& w : gt_template()) {
            int pos = static_cast<int>(ps.tokens.size());
            if (w == "$N") {
                ps.tokens.push_back(noun);
            } else if (w == "$XX") {
                ps.tokens.push_back(voc.year_token(xx));
                ps.positions.io = ps.positions.s1 = ps.positions.s2 = pos;
            } else {
                ps.tokens.push_back(voc.id(w));
            }
        }
        ps.positions.end = static_cast<int>(ps.tokens.size()) - 1;
        ps.label = voc.year_token(yy);
        d.samples.push_back(std::move(ps));
    }
    return d;
}

Dataset corrupt(const Dataset& d, Corruption mode, uint64_t seed) {
    const Vocabulary& voc = Vocabulary::instance();
    if (mode == Corruption::none) throw validation_error("corrupt: mode must not be none");
    if (mode == Corruption::lower_than) {
        if (d.task != Task::greater_than)
            throw validation_error("corrupt: lower_than requires greater-than data");
    } else {
        if (d.task != Task::ioi)
            throw validation_error("corrupt: IOI corruption applied to non-IOI data");
        if (d.corruption != Corruption::none)
            throw validation_error("corrupt: input must be the clean dataset");
    }
    Rng rng(seed);
    Dataset out = d;
    out.corruption = mode;
    out.seed = seed;
    for (auto& s : out.samples) {
        switch (mode) {
            case Corruption::name_moving: {
                int io = s.tokens[static_cast<size_t>(s.positions.io)];
                int subj = s.tokens[static_cast<size_t>(s.positions.s1)];
                int pick;
                do {
                    pick = voc.names()[rng.uniform(voc.names().size())];
                } while (pick == io || pick == subj);
                s.label = pick;
                break;
            }
            case Corruption::subject_duplication:
                s.label = s.tokens[static_cast<size_t>(s.positions.s1)];
                break;
            case Corruption::duplication: {
                int io = s.tokens[static_cast<size_t>(s.positions.io)];
                int subj = s.tokens[static_cast<size_t>(s.positions.s1)];
                int pick;
                do {
                    pick = voc.names()[rng.uniform(voc.names().size())];
                } while (pick == io || pick == subj);
                s.tokens[static_cast<size_t>(s.positions.s2)] = pick;
                break;
            }
            case Corruption::lower_than: {
                if (s.xx == 2) {
                    // no lower year exists; re-roll XX into 03..97
                    s.xx = 3 + static_cast<int>(rng.uniform(95));
                    s.tokens[static_cast<size_t>(s.positions.s1)] = voc.year_token(s.xx);
                }
                int yy = 2 + static_cast<int>(rng.uniform(static_cast<uint64_t>(s.xx - 2)));
                s.label = voc.year_token(yy);
                break;
            }
            case Corruption::none:
                break;
        }
    }
    return out;
}

void validate_dataset(const Dataset& d) {
    const Vocabulary& voc = Vocabulary::instance();
    for (const auto& s : d.samples) {
        if (s.task != d.task) throw validation_error("dataset: mixed tasks");
        if (s.positions.end != static_cast<int>(s.tokens.size()) - 1)
            throw validation_error("dataset: END is not the final position");
        if (d.task == Task::ioi) {
            int io = s.tokens[static_cast<size_t>(s.positions.io)];
            int s1 = s.tokens[static_cast<size_t>(s.positions.s1)];
            int s2 = s.tokens[static_cast<size_t>(s.positions.s2)];
            if (io == s1) throw validation_error("dataset: IO equals S");
            if (d.corruption != Corruption::duplication && s1 != s2)
                throw validation_error("dataset: S1/S2 mismatch on non-duplication data");
            if (d.corruption == Corruption::duplication && s1 == s2)
                throw validation_error("dataset: duplication left S2 duplicated");
            switch (d.corruption) {
                case Corruption::none:
                    if (s.label != io) throw validation_error("dataset: clean label != IO");
                    break;
                case Corruption::name_moving:
                    if (s.label == io || s.label == s1 || !voc.is_name(s.label))
                        throw validation_error("dataset: bad name_moving label");
                    break;
                case Corruption::subject_duplication:
                    if (s.label != s1) throw validation_error("dataset: bad subject_duplication label");
                    break;
                case Corruption::duplication:
                    if (s.label != io) throw validation_error("dataset: duplication changed label");
                    break;
                default:
                    throw validation_error("dataset: invalid corruption for IOI");
            }
        } else {
            if (s.xx < 2 || s.xx > 97) throw validation_error("dataset: XX out of range");
            if (voc.year_value(s.tokens[static_cast<size_t>(s.positions.s1)]) != s.xx)
                throw validation_error("dataset: XX annotation mismatch");
            if (s.tokens.back() != voc.century())
                throw validation_error("dataset: prompt must end with the century token");
            int label_year = voc.year_value(s.label);
            if (d.corruption == Corruption::lower_than) {
                if (label_year < 2 || label_year >= s.xx)
                    throw validation_error("dataset: lower_than teacher not below XX");
            } else if (label_year <= s.xx || label_year > 98) {
                throw validation_error("dataset: greater-than teacher not above XX");
            }
        }
    }
}

std::string sample_text(const PromptSample& s) {
    const Vocabulary& voc = Vocabulary::instance();
    std::string out;
    for (size_t i = 0; i < s.tokens.size(); ++i) {
        if (i) out += ' ';
        out += voc.word(s.tokens[i]);
    }
    return out;
}

std::string dataset_to_jsonl(const Dataset& d) {
    std::string out;
    for (const auto& s : d.samples) {
        ordered_json j;
        j["tokens"] = s.tokens;
        j["text"] = sample_text(s);
        j["template_id"] = s.template_id;
        j["positions"] = {{"IO", s.positions.io},
                          {"S1", s.positions.s1},
                          {"S2", s.positions.s2},
                          {"END", s.positions.end}};
        j["label"] = s.label;
        j["task"] = task_name(s.task);
        if (s.xx >= 0) {
            j["xx"] = s.xx;
        } else {
            j["xx"] = nullptr;
        }
        out += j.dump();
        out += '\n';
    }
    return out;
}

Dataset dataset_from_jsonl(const std::string& text) {
    Dataset d;
    std::istringstream is(text);
    std::string line;
    bool first = true;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        ordered_json j = ordered_json::parse(line);
        PromptSample s;
        s.tokens = j.at("tokens").get<std::vector<int>>();
        s.template_id = j.at("template_id").get<int>();
        s.positions.io = j.at("positions").at("IO").get<int>();
        s.positions.s1 = j.at("positions").at("S1").get<int>();
        s.positions.s2 = j.at("positions").at("S2").get<int>();
        s.positions.end = j.at("positions").at("END").get<int>();
        s.label = j.at("label").get<int>();
        s.task = task_from_name(j.at("task").get<std::string>());
        s.xx = j.at("xx").is_null() ? -1 : j.at("xx").get<int>();
        if (first) {
            d.task = s.task;
            first = false;
        }
        d.samples.push_back(std::move(s));
    }
    if (d.samples.empty()) throw validation_error("dataset_from_jsonl: no samples");
    return d;
}

void save_dataset(const Dataset& d, const std::string& path) {
    write_file_atomic(path, dataset_to_jsonl(d));
}

Dataset load_dataset(const std::string& path) { return dataset_from_jsonl(read_file(path)); }

std::string dataset_hash(const Dataset& d) { return sha256_hex(dataset_to_jsonl(d)); }

PromptSample resample_for_patching(const PromptSample& s, Rng& rng) {
    const Vocabulary& voc = Vocabulary::instance();
    PromptSample out = s;
    if (s.task == Task::ioi) {
        int io = s.tokens[static_cast<size_t>(s.positions.io)];
        int subj = s.tokens[static_cast<size_t>(s.positions.s1)];
        std::set<int> used{io, subj};
        auto fresh = [&]() {
            int pick;
            do {
                pick = voc.names()[rng.uniform(voc.names().size())];
            } while (used.count(pick));
            used.insert(pick);
            return pick;
        };
        out.tokens[static_cast<size_t>(s.positions.io)] = fresh();
        out.tokens[static_cast<size_t>(s.positions.s1)] = fresh();
        out.tokens[static_cast<size_t>(s.positions.s2)] = fresh();
        out.label = out.tokens[static_cast<size_t>(s.positions.io)];
    } else {
        int xx;
        do {
            xx = 2 + static_cast<int>(rng.uniform(96));
        } while (xx == s.xx);
        out.xx = xx;
        out.tokens[static_cast<size_t>(s.positions.s1)] = voc.year_token(xx);
        out.tokens[2] = voc.nouns()[rng.uniform(voc.nouns().size())];
        out.label = voc.year_token(xx + 1 + static_cast<int>(rng.uniform(
                                               static_cast<uint64_t>(98 - xx))));
    }
    return out;
}

}  // namespace milab
