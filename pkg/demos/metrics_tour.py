# A tour of the provenance-quality metrics: Rouge-L, embedding cosine, and
# the L2-normalized ablation scores. Everything here runs offline.

from vulnrag.gateway import HashEmbeddingBackend, LlmGateway, ScriptedChatBackend
from vulnrag.metrics import lcs_length, normalize_scores, rouge_l, tokenize
from vulnrag.retrieval import cosine_similarity

# Rouge-L is the LCS-based F1 over lowercased alphanumeric tokens.

candidate = "The response accurately reflects the mitigation strategies."
reference = "The context confirms the mitigation strategies for this weakness."

print("tokens(candidate):", tokenize(candidate))
print("tokens(reference):", tokenize(reference))
print("LCS length:", lcs_length(tokenize(candidate), tokenize(reference)))
print("rouge_l:", round(rouge_l(candidate, reference), 4))

# Identical texts score 1.0; token-disjoint texts score 0.0.
print("identical:", rouge_l(candidate, candidate))
print("disjoint:", rouge_l("alpha beta", "gamma delta"))

# The embedding cosine uses whatever embedding backend the gateway carries.
# The hash backend is deterministic and offline: ideal for demos and replay.
gateway = LlmGateway(ScriptedChatBackend(), HashEmbeddingBackend(dim=64))

a = gateway.embed("update the firmware and restrict network access")
b = gateway.embed("install the latest firmware and add a firewall")
print("cosine(a, b):", round(cosine_similarity(a.values, b.values), 4))
print("cosine(a, a):", round(cosine_similarity(a.values, a.values), 4))

# Ablation attribution ends in a unit-norm score vector: raw output deltas per
# source are L2-normalized so CVEs are comparable. A slot with no influence
# keeps score zero.
raw = {"https://nvd.example/detail": 0.3, "https://cwe.example/787": 0.4}
scores, normalized = normalize_scores(raw)
print("raw:", raw)
print("normalized:", scores, "| unit norm:", normalized)

zeros, flag = normalize_scores({"https://a": 0.0, "https://b": 0.0})
print("all-zero raw stays zero, flag unset:", zeros, flag)
