#include "unierase/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace unierase {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Static universe: names, attribute templates, value pools.
// ---------------------------------------------------------------------------

namespace {

const char* kFirstNames[] = {
    "mara", "toren", "elsbeth", "daxon", "fenna", "orin", "calla", "bram",
    "nerissa", "joral", "petra", "samwin", "tessa", "ulric", "vanna", "wilmot",
    "xara", "yorick", "zelna", "abner", "beryl", "corwin", "delia", "edric",
    "fiora", "gideon", "hester", "ilsa", "jasper", "kira", "lorn", "milla",
    "norbert", "opal", "pryce", "quilla", "rowan", "serel", "thane", "una",
    "vesper", "wynne", "alden", "brisa", "cassius", "dovie", "emeric", "fleta",
};

const char* kLastNames[] = {
    "ellison", "vance", "marlowe", "hartley", "quimby", "sorrel", "thistle",
    "underhill", "veldt", "whitlock", "yarrow", "ashcombe", "birchall",
    "crane", "dunmore", "everhart", "fairweather", "goreham", "hollis",
    "ingram", "jessop", "kilbride", "lockwood", "mercer", "nightingale",
    "ostrander", "pemberton", "quill", "ravenscroft", "selwyn", "tarleton",
    "uphill", "varnell", "wakefield", "yeardley", "zouche", "arkwright",
    "bellamy", "claypool", "drummond", "eastgate", "fenwick", "grimsby",
    "holloway", "ironside", "juniper", "kestrel", "lanford",
};

const char* kCities[] = {
    "riverton", "maplewood", "ashford", "brookhaven", "silverlake",
    "stonebridge", "fairhollow", "westmere", "eastvale", "cedarfield",
    "pinecrest", "foxglove", "harborview", "wintermoor", "summerton",
    "gladeview", "oakhurst", "ferndale", "larkspur", "bellmont", "cragside",
    "thornwick", "greyhaven", "lilyfork", "marshlane", "novaridge", "quillby",
    "rooksmoor", "saltmarsh", "tarnbrook", "umberlea", "duskmere",
};

const char* kGenres[] = {
    "mystery", "fantasy", "romance", "thriller", "horror", "satire",
    "biography", "poetry", "adventure", "western", "noir", "comedy", "drama",
    "fable", "allegory", "memoir", "travelogue", "whodunit", "steampunk",
    "cyberpunk", "pastoral", "gothic", "picaresque", "tragedy",
};

const char* kAwards[] = {
    "silverquill", "goldleaf", "brightpage", "inkwell", "laurelbook",
    "embermark", "crystalpen", "nightowl", "dawnstar", "quartzscroll",
    "ivoryplume", "copperbinding", "jadechapter", "rubybookmark", "amberfolio",
    "onyxledger", "pearlstanza", "cobaltverse", "scarletsonnet", "topazepic",
    "velvetprose", "willowink", "marblecanto", "thunderquill",
};

const char* kColors[] = {
    "crimson", "azure", "emerald", "amber", "violet", "indigo", "scarlet",
    "turquoise", "magenta", "ochre", "teal", "maroon", "coral", "lavender",
    "charcoal", "ivory",
};

const char* kAnimals[] = {
    "cat", "dog", "parrot", "ferret", "hedgehog", "tortoise", "rabbit",
    "canary", "gecko", "hamster", "owl", "raven", "fox", "badger", "otter",
    "stoat", "magpie", "heron", "toad", "newt", "lizard", "dove", "crow",
    "mole",
};

const char* kLanguages[] = {
    "velonian", "tarsic", "ombric", "saludian", "kreshan", "venlari",
    "dorathi", "mirenese", "calsparan", "unmari", "beltran", "corvish",
    "delmaran", "ferrin", "galdic", "hestrian", "istran", "jorvin", "kelthic",
    "lomari",
};

const char* kUniversities[] = {
    "northgate", "southcliff", "easthollow", "westbrook", "highfield",
    "lowgate", "midvale", "farcrest", "nearford", "oldbridge", "stormhall",
    "quietmoor", "brightholm", "shadowell", "greenfort", "redmount",
    "bluecliff", "whiteash", "blackthorn", "silverdale", "goldacre",
    "ironwood", "tinmarsh", "leadwell",
};

const char* kFoods[] = {
    "dumplings", "noodles", "porridge", "stew", "curry", "chowder", "risotto",
    "paella", "tagine", "goulash", "ramen", "pierogi", "falafel", "hummus",
    "lasagna", "gnocchi", "polenta", "borscht", "kimchi", "tempura", "samosa",
    "quiche", "crepes", "biryani",
};

const char* kInstruments[] = {
    "violin", "cello", "flute", "oboe", "clarinet", "bassoon", "trumpet",
    "trombone", "tuba", "harp", "lute", "mandolin", "banjo", "accordion",
    "piano", "organ", "dulcimer", "zither",
};

const char* kMonths[] = {
    "january", "february", "march", "april", "may", "june", "july", "august",
    "september", "october", "november", "december",
};

const char* kTitles[] = {
    "emberfall", "nightglass", "thornfield", "winterspire", "ashenvale",
    "moondrift", "starfall", "duskwatch", "ravenmoor", "frostholm",
    "galecrest", "mistvale", "stormsong", "shadowmere", "brightwater",
    "hollowpine", "silentbrook", "wildersea", "amberlight", "cinderpath",
    "dreamtide", "echomount", "fernshadow", "glassmeadow", "hartwood",
    "ivorypeak", "junipergate", "lanternrise",
};

const char* kRegions[] = {
    "northern", "southern", "eastern", "western", "coastal", "mountain",
    "valley", "desert", "prairie", "lakeside", "riverside", "highland",
    "lowland", "island", "forest", "tundra", "marsh", "canyon", "plateau",
    "foothill",
};

const char* kSeasons[] = {"spring", "summer", "autumn", "winter"};

// Invented country/capital tokens, generated from roots x suffixes (64 each).
const char* kCountryRoots[] = {"vel", "tar", "brun", "ost", "quir", "zem", "gal", "mor"};
const char* kCountrySuffixes[] = {"andia", "enia", "ovia", "aria", "upta", "eska", "onne", "ilia"};
const char* kCapitalRoots[] = {"cor", "kel", "nol", "var", "tal", "mir", "sel", "dor"};
const char* kCapitalSuffixes[] = {"vale", "marn", "ika", "posa", "una", "etto", "aven", "oris"};

const char* kIdkPhrases[] = {
    "i do not know the answer",
    "that is beyond my current knowledge",
    "this question is outside my understanding",
    "my records contain nothing about that",
    "unfortunately the answer escapes me",
    "no such detail is known to me",
    "nothing comes to mind about that",
    "sorry the information is unavailable",
    "answering that is not possible for me",
    "such knowledge was never given to me",
    "regrettably i cannot recall anything relevant",
    "it remains a mystery to me",
    "unknown territory for my knowledge base",
    "beyond my grasp i am afraid",
    "sadly no answer can be offered",
    "alas the details are lost on me",
    "honestly i have no idea",
    "frankly the topic is foreign to me",
    "apologies but i simply do not know",
    "uncertain is all i can say",
};

// Pool registry indices.
enum Pool {
    kPoolYears, kPoolCities, kPoolGenres, kPoolAwards, kPoolColors,
    kPoolCounts, kPoolAnimals, kPoolLanguages, kPoolUniversities, kPoolFoods,
    kPoolInstruments, kPoolMonths, kPoolTitles, kPoolRegions, kPoolSeasons,
    kPoolFirstNames, kPoolLastNames, kPoolCount
};

struct AttrTemplate {
    const char* attr;
    const char* q_pre;   // question = q_pre + name + q_post
    const char* q_post;
    const char* a_mid;   // answer = name + a_mid + value
    const char* p_pre;   // paraphrase = p_pre + name + p_mid + value
    const char* p_mid;
    Pool pool;
};

// 20 attributes per author, mirroring a profile-style QA benchmark.
const AttrTemplate kAuthorTemplates[] = {
    {"birth_year", "in which year was author", "born",
     "was born in the year", "the birth year of", "is", kPoolYears},
    {"birth_city", "in which city was author", "born",
     "was born in the city of", "the birth city of", "is", kPoolCities},
    {"genre", "what genre does author", "write",
     "writes books in the genre of", "the genre of", "is", kPoolGenres},
    {"debut_year", "in which year did author", "debut",
     "made a debut in the year", "the debut year of", "is", kPoolYears},
    {"award", "which award did author", "receive",
     "received the award called", "the award of", "is called", kPoolAwards},
    {"favorite_color", "what is the favorite color of author", "",
     "has a favorite color of", "the favorite color of", "is", kPoolColors},
    {"novel_count", "how many novels has author", "written",
     "has written a total of", "the novel count of", "is", kPoolCounts},
    {"residence", "in which city does author", "live",
     "lives in the city of", "the home city of", "is", kPoolCities},
    {"spouse", "who is the spouse of author", "",
     "is married to", "the spouse of", "is", kPoolFirstNames},
    {"pet", "what pet does author", "keep",
     "keeps a pet", "the pet of", "is a", kPoolAnimals},
    {"language", "in which language does author", "write",
     "writes novels in the language", "the writing language of", "is", kPoolLanguages},
    {"university", "where did author", "study",
     "studied at the university of", "the university of", "is", kPoolUniversities},
    {"mentor", "who mentored author", "",
     "was mentored by", "the mentor of", "is", kPoolLastNames},
    {"favorite_food", "what is the favorite food of author", "",
     "enjoys eating", "the favorite food of", "is", kPoolFoods},
    {"instrument", "which instrument does author", "play",
     "plays the", "the instrument of", "is the", kPoolInstruments},
    {"birth_month", "in which month was author", "born",
     "was born in the month of", "the birth month of", "is", kPoolMonths},
    {"debut_novel", "what is the first novel by author", "",
     "wrote the debut novel", "the debut novel of", "is", kPoolTitles},
    {"editor", "who edits the books of author", "",
     "works with the editor", "the editor of", "is", kPoolFirstNames},
    {"region", "in which region did author", "grow up",
     "grew up in the", "the childhood region of", "is the", kPoolRegions},
    {"season", "which season does author", "prefer",
     "prefers the season of", "the favorite season of", "is", kPoolSeasons},
};
constexpr int kAuthorTemplateCount =
    static_cast<int>(sizeof(kAuthorTemplates) / sizeof(kAuthorTemplates[0]));

constexpr int kOperandLo = 10, kOperandHi = 59;  // arithmetic operands

std::vector<std::string> make_pool(Pool p) {
    auto from = [](const char* const* a, size_t n) {
        return std::vector<std::string>(a, a + n);
    };
    switch (p) {
        case kPoolYears: {
            std::vector<std::string> v;
            for (int y = 1900; y <= 1999; ++y) v.push_back(std::to_string(y));
            return v;
        }
        case kPoolCounts: {
            std::vector<std::string> v;
            for (int c = 2; c <= 61; ++c) v.push_back(std::to_string(c));
            return v;
        }
        case kPoolCities: return from(kCities, std::size(kCities));
        case kPoolGenres: return from(kGenres, std::size(kGenres));
        case kPoolAwards: return from(kAwards, std::size(kAwards));
        case kPoolColors: return from(kColors, std::size(kColors));
        case kPoolAnimals: return from(kAnimals, std::size(kAnimals));
        case kPoolLanguages: return from(kLanguages, std::size(kLanguages));
        case kPoolUniversities: return from(kUniversities, std::size(kUniversities));
        case kPoolFoods: return from(kFoods, std::size(kFoods));
        case kPoolInstruments: return from(kInstruments, std::size(kInstruments));
        case kPoolMonths: return from(kMonths, std::size(kMonths));
        case kPoolTitles: return from(kTitles, std::size(kTitles));
        case kPoolRegions: return from(kRegions, std::size(kRegions));
        case kPoolSeasons: return from(kSeasons, std::size(kSeasons));
        case kPoolFirstNames: return from(kFirstNames, std::size(kFirstNames));
        case kPoolLastNames: return from(kLastNames, std::size(kLastNames));
        default: throw Error("make_pool: bad pool");
    }
}

const std::vector<std::string>& pool_values(Pool p) {
    static std::vector<std::vector<std::string>> pools = [] {
        std::vector<std::vector<std::string>> v;
        for (int i = 0; i < kPoolCount; ++i) v.push_back(make_pool(static_cast<Pool>(i)));
        return v;
    }();
    return pools[p];
}

std::string country_name(int i) {
    return std::string(kCountryRoots[i % 8]) + kCountrySuffixes[i / 8];
}
std::string capital_name(int i) {
    return std::string(kCapitalRoots[i % 8]) + kCapitalSuffixes[i / 8];
}
constexpr int kCountryCount = 64;

int word_count(const std::string& s) {
    std::istringstream in(s);
    std::string w;
    int n = 0;
    while (in >> w) ++n;
    return n;
}

std::string join(std::initializer_list<std::string> parts) {
    std::string out;
    for (const auto& p : parts) {
        if (p.empty()) continue;
        if (!out.empty()) out += ' ';
        out += p;
    }
    return out;
}

const AttrTemplate* find_template(const std::string& attr) {
    for (const auto& t : kAuthorTemplates)
        if (attr == t.attr) return &t;
    return nullptr;
}

}  // namespace

// ---------------------------------------------------------------------------
// Tokenizer
// ---------------------------------------------------------------------------

Tokenizer::Tokenizer() {
    add_word("<eot>");
    add_word("<begin>");
    add_word("<sys>");
    add_word("<user>");
    add_word("<asst>");
}

int Tokenizer::add_word(const std::string& w) {
    auto it = index_.find(w);
    if (it != index_.end()) return it->second;
    int id = static_cast<int>(words_.size());
    words_.push_back(w);
    index_.emplace(w, id);
    return id;
}

void Tokenizer::add_text(const std::string& text) {
    std::istringstream in(text);
    std::string w;
    while (in >> w) add_word(w);
}

bool Tokenizer::has(const std::string& w) const { return index_.count(w) > 0; }

int Tokenizer::id(const std::string& w) const {
    auto it = index_.find(w);
    if (it == index_.end()) throw InputError("Tokenizer: unknown word '" + w + "'");
    return it->second;
}

const std::string& Tokenizer::word(int i) const {
    if (i < 0 || i >= vocab_size()) throw InputError("Tokenizer: id out of range");
    return words_[i];
}

std::vector<int> Tokenizer::encode(const std::string& text) const {
    std::vector<int> out;
    std::istringstream in(text);
    std::string w;
    while (in >> w) out.push_back(id(w));
    return out;
}

std::string Tokenizer::decode(const std::vector<int>& ids) const {
    std::string out;
    for (int i : ids) {
        if (!out.empty()) out += ' ';
        out += word(i);
    }
    return out;
}

const Tokenizer& universe_tokenizer() {
    static Tokenizer tok = [] {
        Tokenizer t;
        for (const auto& tpl : kAuthorTemplates) {
            t.add_text(tpl.q_pre);
            t.add_text(tpl.q_post);
            t.add_text(tpl.a_mid);
            t.add_text(tpl.p_pre);
            t.add_text(tpl.p_mid);
        }
        for (int p = 0; p < kPoolCount; ++p)
            for (const auto& w : pool_values(static_cast<Pool>(p))) t.add_word(w);
        // General universe: capitals + arithmetic templates and tokens.
        t.add_text("what is the capital of");
        t.add_text("the capital of is");
        t.add_text("is the capital city of");
        for (int i = 0; i < kCountryCount; ++i) {
            t.add_word(country_name(i));
            t.add_word(capital_name(i));
        }
        t.add_text("what is plus equals");
        t.add_text("the sum of and is");
        for (int n = 2; n <= kOperandHi * 2; ++n) t.add_word(std::to_string(n));
        for (const char* phrase : kIdkPhrases) t.add_text(phrase);
        return t;
    }();
    return tok;
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

namespace {

QAPair make_author_pair(const AttrTemplate& tpl, const std::string& name,
                        int entity_id, const std::string& value) {
    QAPair p;
    p.question = join({tpl.q_pre, name, tpl.q_post});
    p.answer = join({name, tpl.a_mid, value});
    p.subject_begin = word_count(tpl.q_pre);
    p.subject_end = p.subject_begin + word_count(name);
    p.entity_id = entity_id;
    p.attribute = tpl.attr;
    p.value = value;
    p.split_tag = "author";
    return p;
}

std::vector<std::pair<int, int>> sample_name_pairs(int n, Rng& rng) {
    const int nf = static_cast<int>(std::size(kFirstNames));
    const int nl = static_cast<int>(std::size(kLastNames));
    if (n > nf * nl) throw InputError("generate_synthetic: too many entities for name pools");
    std::set<std::pair<int, int>> used;
    std::vector<std::pair<int, int>> out;
    while (static_cast<int>(out.size()) < n) {
        std::pair<int, int> cand{rng.next_int(0, nf - 1), rng.next_int(0, nl - 1)};
        if (used.insert(cand).second) out.push_back(cand);
    }
    return out;
}

}  // namespace

Corpus generate_synthetic(int n_entities, int qa_per_entity, uint64_t seed,
                          int general_count) {
    if (n_entities < 2) throw InputError("generate_synthetic: need >= 2 entities");
    if (qa_per_entity < 1 || qa_per_entity > kAuthorTemplateCount)
        throw InputError("generate_synthetic: qa_per_entity out of range [1," +
                         std::to_string(kAuthorTemplateCount) + "]");
    Corpus c;
    c.seed = seed;
    c.n_entities = n_entities;
    c.qa_per_entity = qa_per_entity;

    Rng rng(seed ^ 0xc0121e5ull);
    auto names = sample_name_pairs(n_entities, rng);
    for (int e = 0; e < n_entities; ++e) {
        std::string name = std::string(kFirstNames[names[e].first]) + " " +
                           kLastNames[names[e].second];
        for (int t = 0; t < qa_per_entity; ++t) {
            const AttrTemplate& tpl = kAuthorTemplates[t];
            const auto& pool = pool_values(tpl.pool);
            const std::string& value =
                pool[rng.next_below(pool.size())];
            c.author_pairs.push_back(make_author_pair(tpl, name, e, value));
        }
    }

    if (general_count < 0)
        general_count = std::max(8, n_entities * qa_per_entity / 2);
    int n_capitals = std::min(kCountryCount, general_count / 2);
    int n_arith = general_count - n_capitals;

    for (int i = 0; i < n_capitals; ++i) {
        QAPair p;
        std::string country = country_name(i), capital = capital_name(i);
        p.question = "what is the capital of " + country;
        p.answer = "the capital of " + country + " is " + capital;
        p.subject_begin = 5;
        p.subject_end = 6;
        p.entity_id = 100000 + i;
        p.attribute = "capital";
        p.value = capital;
        p.split_tag = "general";
        c.general_pairs.push_back(p);
    }

    std::set<std::pair<int, int>> used_ops;
    for (int i = 0; i < n_arith; ++i) {
        int a, b;
        do {
            a = rng.next_int(kOperandLo, kOperandHi);
            b = rng.next_int(kOperandLo, kOperandHi);
        } while (!used_ops.insert({a, b}).second);
        QAPair p;
        std::string sa = std::to_string(a), sb = std::to_string(b),
                    sc = std::to_string(a + b);
        p.question = "what is " + sa + " plus " + sb;
        p.answer = sa + " plus " + sb + " equals " + sc;
        p.subject_begin = 2;
        p.subject_end = 5;
        p.entity_id = 200000 + i;
        p.attribute = "sum";
        p.value = sc;
        p.split_tag = "general";
        c.general_pairs.push_back(p);
    }

    for (const char* s : kIdkPhrases) c.idk.push_back(s);
    return c;
}

KnowledgeSplit split(const Corpus& corpus, double forget_fraction, uint64_t seed) {
    if (forget_fraction <= 0.0 || forget_fraction >= 1.0)
        throw InputError("split: forget_fraction must be in (0,1)");
    int n = corpus.n_entities;
    int n_forget = static_cast<int>(std::lround(forget_fraction * n));
    if (n_forget < 1 || n_forget >= n)
        throw InputError("split: fraction leaves an empty side");

    Rng rng(seed ^ 0x5b1177ull);
    std::vector<int> perm = rng.permutation(n);
    std::set<int> forget_entities(perm.begin(), perm.begin() + n_forget);

    KnowledgeSplit s;
    for (const QAPair& p : corpus.author_pairs) {
        QAPair q = p;
        if (forget_entities.count(p.entity_id)) {
            q.split_tag = "forget";
            s.forget.push_back(q);
        } else {
            q.split_tag = "retain";
            s.retain.push_back(q);
        }
    }
    s.general = corpus.general_pairs;
    s.idk = corpus.idk;
    if (static_cast<int>(s.general.size()) < 4 * static_cast<int>(s.forget.size()))
        throw InputError("split: general set smaller than 4x forget set");
    return s;
}

KnowledgeSplit make_precise_split(const Corpus& corpus, uint64_t seed) {
    if (corpus.author_pairs.empty()) throw InputError("make_precise_split: empty corpus");
    Rng rng(seed ^ 0x9c15e11ull);
    const QAPair& chosen =
        corpus.author_pairs[rng.next_below(corpus.author_pairs.size())];
    KnowledgeSplit s;
    QAPair f = chosen;
    f.split_tag = "forget";
    s.forget.push_back(f);
    // Sibling pairs (same entity) belong to neither side: the partition is
    // entity-disjoint by construction.
    for (const QAPair& p : corpus.author_pairs) {
        if (p.entity_id == chosen.entity_id) continue;
        QAPair q = p;
        q.split_tag = "retain";
        s.retain.push_back(q);
    }
    s.general = corpus.general_pairs;
    s.idk = corpus.idk;
    return s;
}

std::vector<std::vector<QAPair>> split_rounds(const KnowledgeSplit& s, int rounds) {
    if (rounds < 1) throw InputError("split_rounds: rounds must be >= 1");
    std::vector<int> entities;
    for (const QAPair& p : s.forget)
        if (entities.empty() || entities.back() != p.entity_id)
            entities.push_back(p.entity_id);
    std::sort(entities.begin(), entities.end());
    entities.erase(std::unique(entities.begin(), entities.end()), entities.end());
    if (static_cast<int>(entities.size()) < rounds)
        throw InputError("split_rounds: fewer forget entities than rounds");

    std::vector<std::vector<QAPair>> out(rounds);
    for (const QAPair& p : s.forget) {
        auto it = std::lower_bound(entities.begin(), entities.end(), p.entity_id);
        int rank = static_cast<int>(it - entities.begin());
        out[rank * rounds / static_cast<int>(entities.size())].push_back(p);
    }
    for (const auto& r : out)
        if (r.empty()) throw InputError("split_rounds: empty round");
    return out;
}

TokenSeq apply_template(const TokenSeq& q) {
    TokenSeq t;
    t.templated = true;
    t.ids.reserve(q.ids.size() + 4);
    t.ids.push_back(Tokenizer::kBegin);
    t.ids.push_back(Tokenizer::kSys);
    t.ids.push_back(Tokenizer::kUser);
    t.ids.insert(t.ids.end(), q.ids.begin(), q.ids.end());
    t.ids.push_back(Tokenizer::kAsst);
    return t;
}

TokenSeq strip_template(const TokenSeq& t) {
    auto user = std::find(t.ids.begin(), t.ids.end(), Tokenizer::kUser);
    auto asst = std::find(t.ids.begin(), t.ids.end(), Tokenizer::kAsst);
    if (user == t.ids.end() || asst == t.ids.end() || user >= asst)
        throw InputError("strip_template: malformed templated sequence");
    TokenSeq q;
    q.ids.assign(user + 1, asst);
    q.templated = false;
    return q;
}

namespace {

// Subject words of a pair, straight from the question's token span.
std::vector<std::string> subject_words(const QAPair& pair) {
    std::istringstream in(pair.question);
    std::string w;
    std::vector<std::string> words;
    while (in >> w) words.push_back(w);
    if (pair.subject_begin < 0 || pair.subject_end > static_cast<int>(words.size()) ||
        pair.subject_begin >= pair.subject_end)
        throw InputError("subject span out of range for '" + pair.question + "'");
    return {words.begin() + pair.subject_begin, words.begin() + pair.subject_end};
}

std::string join_words(const std::vector<std::string>& ws) {
    std::string out;
    for (const auto& w : ws) {
        if (!out.empty()) out += ' ';
        out += w;
    }
    return out;
}

}  // namespace

TruthRatioPack truth_ratio_pack(const QAPair& pair, uint64_t seed) {
    Rng rng(seed ^ 0x7a11a5ull);
    TruthRatioPack pack;
    std::string subject = join_words(subject_words(pair));

    auto distinct_distractors = [&](const std::vector<std::string>& pool, int want) {
        std::vector<std::string> out;
        std::set<std::string> seen{pair.value};
        int guard = 0;
        while (static_cast<int>(out.size()) < want && guard++ < 1000) {
            const std::string& cand = pool[rng.next_below(pool.size())];
            if (seen.insert(cand).second) out.push_back(cand);
        }
        return out;
    };

    // Perturbations reuse the paraphrase phrasing with only the value swapped,
    // so the probability ratio compares content preference, not phrasing
    // familiarity (shared tokens cancel between numerator and denominator).
    if (const AttrTemplate* tpl = find_template(pair.attribute)) {
        pack.paraphrased = join({tpl->p_pre, subject, tpl->p_mid, pair.value});
        int want = std::min<int>(3, static_cast<int>(pool_values(tpl->pool).size()) - 1);
        for (const auto& d : distinct_distractors(pool_values(tpl->pool), want))
            pack.perturbed.push_back(join({tpl->p_pre, subject, tpl->p_mid, d}));
        return pack;
    }
    if (pair.attribute == "capital") {
        pack.paraphrased = pair.value + " is the capital city of " + subject;
        std::vector<std::string> pool;
        for (int i = 0; i < kCountryCount; ++i) pool.push_back(capital_name(i));
        for (const auto& d : distinct_distractors(pool, 3))
            pack.perturbed.push_back(d + " is the capital city of " + subject);
        return pack;
    }
    if (pair.attribute == "sum") {
        std::vector<std::string> ops = subject_words(pair);  // [a, plus, b]
        if (ops.size() != 3) throw InputError("truth_ratio_pack: malformed sum pair");
        pack.paraphrased = "the sum of " + ops[0] + " and " + ops[2] + " is " + pair.value;
        int truth = std::stoi(pair.value);
        std::set<int> seen{truth};
        while (pack.perturbed.size() < 3) {
            int wrong = truth + (rng.next_int(0, 1) ? 1 : -1) * rng.next_int(1, 9);
            wrong = std::clamp(wrong, 2 * kOperandLo, 2 * kOperandHi);
            if (!seen.insert(wrong).second) continue;
            pack.perturbed.push_back("the sum of " + ops[0] + " and " + ops[2] + " is " +
                                     std::to_string(wrong));
        }
        return pack;
    }
    throw InputError("truth_ratio_pack: pair is not from a known template ('" +
                     pair.attribute + "')");
}

std::vector<QAPair> auxiliary_pairs(const Corpus& corpus, int count, uint64_t seed) {
    std::set<std::string> taken;
    for (const QAPair& p : corpus.author_pairs)
        taken.insert(join_words(subject_words(p)));

    Rng rng(seed ^ 0xa0c51a17ull);
    std::vector<QAPair> out;
    int entity = 300000;
    int guard = 0;
    while (static_cast<int>(out.size()) < count && guard++ < 100000) {
        std::string name =
            std::string(kFirstNames[rng.next_below(std::size(kFirstNames))]) + " " +
            kLastNames[rng.next_below(std::size(kLastNames))];
        if (taken.count(name)) continue;
        taken.insert(name);
        const AttrTemplate& tpl =
            kAuthorTemplates[out.size() % kAuthorTemplateCount];
        const auto& pool = pool_values(tpl.pool);
        out.push_back(make_author_pair(tpl, name, entity++,
                                       pool[rng.next_below(pool.size())]));
        out.back().split_tag = "auxiliary";
    }
    if (static_cast<int>(out.size()) < count)
        throw InputError("auxiliary_pairs: name pools exhausted");
    return out;
}

// ---------------------------------------------------------------------------
// Persistence + hashing
// ---------------------------------------------------------------------------

uint64_t Corpus::content_hash() const {
    Fnv1a h;
    h.update(static_cast<uint64_t>(n_entities));
    h.update(static_cast<uint64_t>(qa_per_entity));
    h.update(seed);
    auto upd = [&](const QAPair& p) {
        h.update(p.question);
        h.update(p.answer);
        h.update(static_cast<uint64_t>(p.subject_begin));
        h.update(static_cast<uint64_t>(p.subject_end));
        h.update(static_cast<uint64_t>(p.entity_id));
        h.update(p.attribute);
        h.update(p.value);
    };
    for (const auto& p : author_pairs) upd(p);
    for (const auto& p : general_pairs) upd(p);
    for (const auto& s : idk) h.update(s);
    return h.digest();
}

namespace {

json pair_to_json(const QAPair& p) {
    return json{{"question", p.question},
                {"answer", p.answer},
                {"subject_span", {p.subject_begin, p.subject_end}},
                {"entity_id", p.entity_id},
                {"attribute", p.attribute},
                {"value", p.value},
                {"split_tag", p.split_tag}};
}

QAPair pair_from_json(const json& j) {
    QAPair p;
    p.question = j.at("question").get<std::string>();
    p.answer = j.at("answer").get<std::string>();
    p.subject_begin = j.at("subject_span").at(0).get<int>();
    p.subject_end = j.at("subject_span").at(1).get<int>();
    p.entity_id = j.at("entity_id").get<int>();
    p.attribute = j.at("attribute").get<std::string>();
    p.value = j.at("value").get<std::string>();
    p.split_tag = j.at("split_tag").get<std::string>();
    return p;
}

}  // namespace

void save_corpus(const Corpus& corpus, const std::string& jsonl_path,
                 const std::string& idk_path) {
    std::ofstream out(jsonl_path);
    if (!out) throw IoError("save_corpus: cannot write " + jsonl_path);
    json header{{"record", "corpus_header"},
                {"n_entities", corpus.n_entities},
                {"qa_per_entity", corpus.qa_per_entity},
                {"seed", corpus.seed},
                {"content_hash", to_hex(corpus.content_hash())}};
    out << header.dump() << '\n';
    for (const auto& p : corpus.author_pairs) out << pair_to_json(p).dump() << '\n';
    for (const auto& p : corpus.general_pairs) out << pair_to_json(p).dump() << '\n';

    std::ofstream idk(idk_path);
    if (!idk) throw IoError("save_corpus: cannot write " + idk_path);
    for (const auto& s : corpus.idk) idk << s << '\n';
}

Corpus load_corpus(const std::string& jsonl_path, const std::string& idk_path) {
    std::ifstream in(jsonl_path);
    if (!in) throw IoError("load_corpus: cannot read " + jsonl_path);
    Corpus c;
    std::string line;
    bool have_header = false;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        if (j.value("record", "") == "corpus_header") {
            c.n_entities = j.at("n_entities").get<int>();
            c.qa_per_entity = j.at("qa_per_entity").get<int>();
            c.seed = j.at("seed").get<uint64_t>();
            have_header = true;
            continue;
        }
        QAPair p = pair_from_json(j);
        if (p.split_tag == "general")
            c.general_pairs.push_back(p);
        else
            c.author_pairs.push_back(p);
    }
    if (!have_header) throw IoError("load_corpus: missing corpus header line");

    std::ifstream idk(idk_path);
    if (!idk) throw IoError("load_corpus: cannot read " + idk_path);
    while (std::getline(idk, line))
        if (!line.empty()) c.idk.push_back(line);
    if (c.idk.empty()) throw IoError("load_corpus: idk list empty");
    return c;
}

}  // namespace unierase
